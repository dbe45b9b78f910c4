"""Acceptance suite: one test per numbered criterion, each printing a PASS/FAIL line.

Training runs are cached under ``.acceptance_cache/`` (or
``$PHYSVAE_ACCEPTANCE_CACHE``), keyed by the run config and a hash of the
package sources, so a code change retrains and a rerun is cheap.  A cold
cache means about 21 training runs of a few minutes each.
"""

import hashlib
import json
import os
import time
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

from physvae import cli
from physvae import datapipe as dp
from physvae import diffgraph as dg
from physvae import imops
from physvae import phys_loss as pl
from physvae import segmentation as sg
from physvae import trainer as tr
from physvae import vae_core as vc

from oracles import exhaustive_otsu, exhaustive_otsu3, naive_bilateral, naive_logmag, partition_of

pytestmark = pytest.mark.acceptance

ROOT = Path(__file__).resolve().parent.parent
CACHE = Path(os.environ.get("PHYSVAE_ACCEPTANCE_CACHE", ROOT / ".acceptance_cache"))
SEEDS = range(5)
EPOCHS = 50

PHYSICS = {
    "none": {"kind": "none"},
    "sl1": {"kind": "sl1", "w": 0.1},
    "sl2": {"kind": "sl2", "w": 0.05},
    "maximize": {"kind": "sl1", "w": 0.5, "sign": "maximize"},
}


def run_config(seed: int, physics: dict) -> tr.TrainConfig:
    return tr.TrainConfig.from_dict(
        {
            "epochs": EPOCHS,
            "seed": seed,
            "block_grid": [16, 16],
            "physics_warmup": 30,
            "schedule": {"beta_start": 0.05, "beta_end": 1.0, "ramp_epochs": EPOCHS, "total_epochs": EPOCHS},
            "optimizer": {"learning_rate": 3e-3},
            "model": {"hidden": [128, 128], "decoder_hidden": [32, 32], "k": 1.0},
            "physics": physics,
        }
    )


@lru_cache(maxsize=None)
def source_hash() -> str:
    h = hashlib.sha256()
    for f in sorted((ROOT / "src" / "physvae").glob("*.py")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()[:16]


@lru_cache(maxsize=None)
def dataset(kind: str) -> dp.SyntheticTruth:
    if kind == "two-phase":
        return dp.synth_two_phase(seed=0)
    return dp.synth_multiphase(seed=0, n_phases=3)


@lru_cache(maxsize=None)
def patchset(kind: str) -> dp.PatchSet:
    return dp.extract_patches(dataset(kind).micrograph, 16, 2)


@lru_cache(maxsize=None)
def trained(variant: str, seed: int, data: str = "two-phase") -> dict:
    """Train (or load from cache) one acceptance run."""
    cfg = run_config(seed, PHYSICS[variant])
    key_src = json.dumps({"data": data, "cfg": cfg.to_dict(), "src": source_hash()}, sort_keys=True)
    d = CACHE / f"{data}_{variant}_s{seed}_{hashlib.sha256(key_src.encode()).hexdigest()[:12]}"
    if not (d / "done").exists():
        d.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        res = tr.train(patchset(data), cfg)
        seconds = time.perf_counter() - t0
        field = tr.embed(res.params, patchset(data))
        np.savez(d / "run.npz", maps=field.maps, history=np.array(res.history), seconds=seconds)
        tr.save_params(d / "params.pvae", res.params)
        (d / "done").write_text(key_src)
    z = np.load(d / "run.npz")
    return {
        "maps": z["maps"],
        "history": z["history"],
        "seconds": float(z["seconds"]),
        "params": tr.load_params(d / "params.pvae"),
    }


def column(run: dict, name: str) -> np.ndarray:
    return run["history"][:, tr.METRIC_COLUMNS.index(name)]


def binary_labels(maps: np.ndarray) -> list[sg.LabelMap]:
    return sg.segment_pipeline(sg.LatentField(maps, maps.shape[1:]), 0.1, mode="binary")


def best_map(maps: np.ndarray, truth: np.ndarray) -> tuple[int, float, sg.LabelMap]:
    """Index, IoU and labels of the content map that best matches the truth."""
    scored = []
    for j, lm in enumerate(binary_labels(maps)):
        scored.append((float(sg.iou_per_class(lm.labels, truth)[0].mean()), j, lm))
    iou, j, lm = max(scored, key=lambda t: t[0])
    return j, iou, lm


# ------------------------------------------------------------ criterion 1


def _rand(rng, *shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, shape)


def _away_from(rng, shape, kinks, gap=0.05):
    # resample entries that sit within finite-difference reach of a kink
    x = _rand(rng, *shape)
    for k in kinks:
        near = np.abs(x - k) < gap
        x[near] += np.sign(x[near] - k + 1e-9) * 2 * gap
    return x


def gradient_instances(rng):
    """(name, f, inputs) triples covering every differentiable operator and loss."""
    out = []
    kernel = rng.normal(size=(3, 3))

    def weighted(f, *xs):
        w = rng.normal(size=f(*[dg.constant(x) for x in xs]).shape)
        return lambda *ns: dg.sum(f(*ns) * w)

    unary = {
        "tanh": (dg.tanh, lambda s: _rand(rng, *s)),
        "sigmoid": (dg.sigmoid, lambda s: _rand(rng, *s)),
        "softplus": (dg.softplus, lambda s: _rand(rng, *s)),
        "exp": (dg.exp, lambda s: _rand(rng, *s)),
        "log": (dg.log, lambda s: _rand(rng, *s, lo=0.5, hi=3.0)),
        "sqrt": (dg.sqrt, lambda s: _rand(rng, *s, lo=0.5, hi=3.0)),
        "square": (dg.square, lambda s: _rand(rng, *s)),
        "abs_smooth": (dg.abs_smooth, lambda s: _rand(rng, *s)),
        "neg": (dg.neg, lambda s: _rand(rng, *s)),
        "relu": (dg.relu, lambda s: _away_from(rng, s, [0.0])),
        "clip": (lambda x: dg.clip(x, -1.0, 1.0), lambda s: _away_from(rng, s, [-1.0, 1.0])),
        "scalar_ops": (lambda x: (x * 1.7 + 0.3) / 2.5 - 1.0, lambda s: _rand(rng, *s)),
        "sum": (lambda x: dg.sum(x, axis=1), lambda s: _rand(rng, *s)),
        "mean": (lambda x: dg.mean(x, axis=0, keepdims=True), lambda s: _rand(rng, *s)),
        "amax": (dg.amax, lambda s: _rand(rng, *s)),
        "amin": (dg.amin, lambda s: _rand(rng, *s)),
        "reshape": (lambda x: dg.reshape(x, (-1,)), lambda s: _rand(rng, *s)),
        "transpose": (dg.transpose, lambda s: _rand(rng, *s)),
        "slice": (lambda x: x[1:, ::2], lambda s: _rand(rng, *s)),
        "reflect_pad": (lambda x: dg.reflect_pad(x, 2), lambda s: _rand(rng, *s)),
        "conv2d_3x3": (lambda x: dg.conv2d_3x3(x, kernel), lambda s: _rand(rng, *s)),
    }
    for name, (op, gen) in unary.items():
        for _ in range(3):
            x = gen((int(rng.integers(3, 7)), int(rng.integers(3, 7))))
            out.append((name, weighted(op, x), [x]))

    binary = {
        "add": dg.add,
        "sub": dg.sub,
        "mul": dg.mul,
        "div": lambda a, b: dg.div(a, dg.exp(b)),
        "broadcast_add": lambda a, b: a + b[:1, :],
        "concat": lambda a, b: dg.concat([a, b], axis=1),
    }
    for name, op in binary.items():
        for _ in range(3):
            s = (int(rng.integers(2, 6)), int(rng.integers(2, 6)))
            a, b = _rand(rng, *s), _rand(rng, *s)
            out.append((name, weighted(op, a, b), [a, b]))
    for _ in range(3):
        n, k, m = rng.integers(2, 6, size=3)
        a, b = _rand(rng, n, k), _rand(rng, k, m)
        out.append(("matmul", weighted(dg.matmul, a, b), [a, b]))

    for _ in range(4):
        m = rng.uniform(0.05, 0.95, size=(6, 7))
        # bilateral weights are detached, so the check pins them at the evaluation point
        out.append(("bilateral_filter", weighted(lambda x, g=m: imops.bilateral_filter(x, 0.2, guide=g), m), [m]))
        out.append(("scharr_magnitude", weighted(imops.scharr_magnitude, m), [m]))
        out.append(("dft2_logmag", weighted(imops.dft2_logmag, m), [m]))

    for kind in ("sl1", "sl2"):
        for i in range(4):
            a, b = rng.uniform(size=(8, 8)), rng.uniform(size=(8, 8))
            cfg = pl.PhysicsLossConfig(kind=kind, sign="minimize" if i % 2 else "maximize")
            f = lambda x, y, ref=(a, b), c=cfg: pl.physics_score(pl.BatchMap([x, y], (8, 8)), c, reference=list(ref))
            out.append((kind, f, [a, b]))

    for likelihood in ("bernoulli", "mse"):
        for _ in range(2):
            p = vc.init_params(3, hidden=(5,), rng=rng, likelihood=likelihood)
            x, eps = rng.uniform(0.05, 0.95, size=(2, 9)), rng.normal(size=(2, 4))
            beta = float(rng.uniform(0.05, 1.0))

            def f(*nodes, p=p, x=x, eps=eps, beta=beta):
                pn = vc.ParamNodes(p, requires_grad=False)
                it = iter(nodes)
                pn.encoder = [(next(it), next(it)) for _ in p.encoder]
                pn.decoder = [(next(it), next(it)) for _ in p.decoder]
                return vc.elbo_loss(pn, x, eps, beta)

            out.append((f"elbo_loss[{likelihood}]", f, p.arrays()))
    return out


def test_criterion_01_gradient_suite(report):
    t0 = time.perf_counter()
    instances = gradient_instances(np.random.default_rng(2024))
    failed = []
    for name, f, inputs in instances:
        rep = dg.grad_check(f, inputs, h=1e-4, tol=1e-3)
        if not rep.passed:
            failed.append((name, max(rep.max_rel_error)))
    # detach has a zero Jacobian by contract, so it is checked by its exact rule
    x = dg.variable(np.random.default_rng(1).normal(size=(3, 4)))
    dg.backward(dg.sum(x * dg.detach(x)))
    detach_ok = np.array_equal(x.grad, x.value) and np.array_equal(dg.detach(x).value, x.value)
    seconds = time.perf_counter() - t0
    ok = not failed and detach_ok and len(instances) >= 100 and seconds < 60
    report(
        "criterion 1 (gradient suite)",
        ok,
        f"{len(instances)} instances over {len({n for n, _, _ in instances})} ops, "
        f"failures {failed}, detach rule {detach_ok}, {seconds:.1f}s",
    )
    assert ok


# ------------------------------------------------------------ criterion 2


def test_criterion_02_oracle_equivalences(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    dft_err = max(
        float(np.abs(imops.dft2_logmag_array(m) - naive_logmag(m)).max())
        for m in (rng.uniform(size=(16, 16)) for _ in range(3))
    )
    otsu_mismatch = 0
    for i in range(50):
        m = rng.uniform(size=(16, 16)) ** (1 + i % 3)
        if sg.otsu(m) != exhaustive_otsu(m, 2)[0]:
            otsu_mismatch += 1
        t3 = sg.multi_otsu(m, 3)
        if not np.array_equal(t3, exhaustive_otsu3(m)):
            otsu_mismatch += 1
        if not np.array_equal(sg.apply_thresholds(m, t3), partition_of(m, t3)):
            otsu_mismatch += 1
    bil_err = 0.0
    for _ in range(5):
        m = rng.uniform(size=(6, 6))
        sigma = float(rng.uniform(0.05, 0.5))
        bil_err = max(bil_err, float(np.abs(imops.bilateral_filter_array(m, sigma) - naive_bilateral(m, sigma)).max()))
    seconds = time.perf_counter() - t0
    ok = dft_err <= 1e-9 and otsu_mismatch == 0 and bil_err <= 1e-12 and seconds < 60
    report(
        "criterion 2 (oracle equivalences)",
        ok,
        f"dft max err {dft_err:.2e}, otsu/multi_otsu mismatches {otsu_mismatch}/150, "
        f"bilateral max err {bil_err:.2e}, {seconds:.1f}s",
    )
    assert ok


# ------------------------------------------------------------ criterion 3


def test_criterion_03_loss_identities(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    const = np.full((8, 8), 0.37)
    const_ok = all(
        pl.physics_score(pl.BatchMap([dg.constant(const)] * 2, (8, 8)), pl.PhysicsLossConfig(kind=k)).item() == 0.0
        for k in ("sl1", "sl2")
    )
    sl2_vals = []
    for _ in range(1000):
        h, w = rng.integers(4, 17, size=2)
        maps = [dg.constant(rng.normal(size=(h, w)) * rng.uniform(1e-3, 10)) for _ in range(2)]
        sl2_vals.append(pl.sl2(pl.BatchMap(maps, (h, w)), pl.PhysicsLossConfig(kind="sl2")).item())
    sl2_vals = np.array(sl2_vals)
    bounded = bool(np.all((sl2_vals >= 0.0) & (sl2_vals <= 1.0)))
    ratio_ok = True
    for _ in range(200):
        v, psi, w = rng.uniform(0.1, 500), rng.uniform(0, 1), rng.uniform(0, 0.5)
        cfg = pl.PhysicsLossConfig(kind="sl1", w=w)
        total = pl.combined_loss(dg.constant(v), dg.constant(psi), cfg).item()
        ratio_ok &= total == v * (psi + w) and total / v == pytest.approx(w + psi, rel=1e-15, abs=0)
    mask_ok = True
    for kind in ("sl1", "sl2"):
        mu = dg.variable(rng.normal(size=(64, 5)))
        cfg = pl.PhysicsLossConfig(kind=kind, map_mask=(0, 2))
        dg.backward(pl.combined_loss(dg.constant(2.0), pl.physics_score(pl.assemble_batch_map(mu, (8, 8)), cfg), cfg))
        # columns: 2 shift dims, then content maps 0, 1, 2; map 1 is excluded
        mask_ok &= bool(np.all(mu.grad[:, [0, 1, 3]] == 0.0) and np.any(mu.grad[:, 2] != 0.0))
    seconds = time.perf_counter() - t0
    ok = const_ok and bounded and ratio_ok and mask_ok and seconds < 30
    report(
        "criterion 3 (loss identities)",
        ok,
        f"constant maps score 0: {const_ok}; SL2 in [{sl2_vals.min():.3f}, {sl2_vals.max():.3f}] over 1000 maps; "
        f"ratio == w + psi: {ratio_ok}; masked grads exactly 0: {mask_ok}; {seconds:.1f}s",
    )
    assert ok


# ------------------------------------------------------------ criterion 4


def test_criterion_04_baseline_training(report):
    run = trained("none", 0)
    recon_px = column(run, "recon")[-1] / 16**2
    elbo = column(run, "vae_loss")
    steps = np.diff(elbo)
    early_up = int(np.sum(steps[:9] >= 0))
    late_up = int(np.sum(steps[9:] >= 0))
    # the same count at beta = 1 (recon + KL), reported for comparison only
    unit = np.diff(column(run, "recon") + column(run, "kl"))
    ok = recon_px <= 0.15 and early_up == 0 and late_up <= 2
    report(
        "criterion 4 (baseline training)",
        ok,
        f"final recon {recon_px:.4f}/px (<= 0.15); ELBO rises in first 10 epochs: {early_up}, "
        f"afterwards: {late_up} (<= 2); at beta=1: {int(np.sum(unit[:9] >= 0))} and {int(np.sum(unit[9:] >= 0))}; "
        f"trained in {run['seconds'] / 60:.1f} min",
    )
    assert ok


# ------------------------------------------------------------ criterion 5


def test_criterion_05_sl1_reduces_edges(report):
    truth = dataset("two-phase").phase_mask
    rows, wins = [], 0
    for s in SEEDS:
        base, phys = trained("none", s), trained("sl1", s)
        e0, e1 = pl.mean_edge_magnitude(base["maps"]), pl.mean_edge_magnitude(phys["maps"])
        cc0 = sg.connected_components(best_map(base["maps"], truth)[2].labels)
        cc1 = sg.connected_components(best_map(phys["maps"], truth)[2].labels)
        win = e1 <= 0.8 * e0 and cc1 <= cc0
        wins += win
        rows.append(f"s{s}: edge {e0:.4f}->{e1:.4f} ({(e1 / e0 - 1) * 100:+.0f}%), cc {cc0}->{cc1}")
    ok = wins >= 4
    report("criterion 5 (SL1 edge reduction)", ok, f"{wins}/5 seeds; " + "; ".join(rows))
    assert ok


# ------------------------------------------------------------ criterion 6


def test_criterion_06_sl2_concentrates_spectrum(report):
    rows, wins = [], 0
    for s in SEEDS:
        base, phys = trained("none", s), trained("sl2", s)
        f0 = pl.off_center_energy_fraction(base["maps"])
        f1 = pl.off_center_energy_fraction(phys["maps"])
        win = f1 <= 0.85 * f0
        wins += win
        logf = (pl.off_center_fraction(base["maps"]), pl.off_center_fraction(phys["maps"]))
        rows.append(f"s{s}: energy {f0:.4f}->{f1:.4f} ({(f1 / f0 - 1) * 100:+.0f}%), log {logf[0]:.3f}->{logf[1]:.3f}")
    ok = wins >= 4
    report("criterion 6 (SL2 spectral concentration)", ok, f"{wins}/5 seeds; " + "; ".join(rows))
    assert ok


# ------------------------------------------------------------ criterion 7


def test_criterion_07_boundary_recovery(report):
    truth = dataset("two-phase").phase_mask
    j, iou_two, _ = best_map(trained("sl1", 0)["maps"], truth)
    multi = dataset("multiphase")
    maps = trained("sl1", 0, data="multiphase")["maps"]
    # the multi-level setting smooths harder (denoise 0.3) than the binary one
    ious = [
        float(sg.iou_per_class(lm.labels, multi.phase_mask)[0].mean())
        for lm in sg.segment_pipeline(sg.LatentField(maps, maps.shape[1:]), 0.3, mode="multi", n_classes=3)
    ]
    ok = iou_two >= 0.8 and max(ious) >= 0.7
    report(
        "criterion 7 (boundary recovery)",
        ok,
        f"two-phase binary IoU {iou_two:.3f} (z{j + 1}, >= 0.8); "
        f"multiphase multi_otsu(3), denoise 0.3, mean IoU per map {[round(v, 3) for v in ious]} (best >= 0.7)",
    )
    assert ok


# ------------------------------------------------------------ criterion 8


def test_criterion_08_maximize_raises_edges(report):
    rows, wins = [], 0
    for s in SEEDS:
        e0 = pl.mean_edge_magnitude(trained("none", s)["maps"])
        e1 = pl.mean_edge_magnitude(trained("maximize", s)["maps"])
        wins += e1 > e0
        rows.append(f"s{s}: {e0:.4f}->{e1:.4f}")
    ok = wins >= 4
    report("criterion 8 (maximize sign flip)", ok, f"{wins}/5 seeds higher; " + "; ".join(rows))
    assert ok


# ------------------------------------------------------------ criterion 9


def test_criterion_09_determinism_and_resume(report, tmp_path):
    ps = dp.extract_patches(dp.synth_two_phase(seed=1, side=128).micrograph, 16, 8)
    cfg = tr.TrainConfig.from_dict(
        {
            "epochs": 10,
            "seed": 3,
            "block_grid": [4, 4],
            "model": {"hidden": [12], "decoder_hidden": [8]},
            "physics": {"kind": "sl1", "w": 0.1},
        }
    )
    tr.train(ps, cfg, run_dir=tmp_path / "a")
    tr.train(ps, cfg, run_dir=tmp_path / "b")
    same = (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()
    tr.train(ps, cfg, run_dir=tmp_path / "c", stop_epoch=5)
    resumed = tr.train(ps, cfg, run_dir=tmp_path / "c", resume=tr.load_checkpoint(tmp_path / "c/checkpoint.pvae"))
    full = tr.load_checkpoint(tmp_path / "a/checkpoint.pvae")
    resume_ok = (
        (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "c/metrics.csv").read_bytes()
        and tr.params_to_bytes(full.params) == tr.params_to_bytes(resumed.params)
        and (tmp_path / "a/checkpoint.pvae").read_bytes() == (tmp_path / "c/checkpoint.pvae").read_bytes()
    )
    ok = same and resume_ok
    report(
        "criterion 9 (determinism and resume)",
        ok,
        f"repeat run metrics bit-identical: {same}; 5+5 resume equals 10 (metrics, params, checkpoint): {resume_ok}",
    )
    assert ok


# ----------------------------------------------------------- criterion 10


def test_criterion_10_flatness_guard(report, monkeypatch):
    def forbidden(*a, **k):
        raise AssertionError("thresholding called on a flat map")

    for name in ("otsu", "multi_otsu", "chan_vese"):
        monkeypatch.setattr(sg, name, forbidden)
    rng = np.random.default_rng(5)
    results = []
    for _ in range(20):
        m = 0.4 + rng.uniform(0, 1, size=(12, 12)) * rng.uniform(0, 0.999e-3)
        for mode, n in (("binary", 2), ("multi", 3), ("multi", 4)):
            lm = sg.segment_map(m, 0.1, mode=mode, n_classes=n)
            results.append(lm.n_classes == 1 and not lm.labels.any() and lm.labels.shape == m.shape)
    ok = all(results)
    report("criterion 10 (flatness guard)", ok, f"{sum(results)}/{len(results)} flat maps -> single uniform label, no thresholding")
    assert ok


# ------------------------------------------------ checks calibrated on the runs


def test_translated_patches_share_content_latents(report):
    """Integer translations up to k*s/2 px move content latents less than a random pair does."""
    run = trained("none", 0)
    params, img = run["params"], dataset("two-phase").micrograph.pixels
    rng = np.random.default_rng(0)
    s, reach = 16, int(params.layout.k * 16 / 2)
    a, b = [], []
    while len(a) < 200:
        r, c = rng.integers(reach, img.shape[0] - s - reach, size=2)
        dr, dc = rng.integers(-reach, reach + 1, size=2)
        if dr == dc == 0:
            continue
        a.append(dp.normalize_patch(img[r : r + s, c : c + s]).ravel())
        b.append(dp.normalize_patch(img[r + dr : r + dr + s, c + dc : c + dc + s]).ravel())
    mu_a = vc.encode(params, np.array(a)).mu.value[:, 2:]
    mu_b = vc.encode(params, np.array(b)).mu.value[:, 2:]
    shifted = np.linalg.norm(mu_a - mu_b, axis=1)
    mu = vc.encode(params, patchset("two-phase").patches).mu.value[:, 2:]
    i, j = rng.integers(0, len(mu), size=(2, 2000))
    p20 = float(np.percentile(np.linalg.norm(mu[i] - mu[j], axis=1), 20))
    ok = float(np.median(shifted)) < p20
    report(
        "check translated-patch latents",
        ok,
        f"median shifted-pair distance {np.median(shifted):.3f} vs random-pair 20th percentile {p20:.3f} "
        f"({np.mean(shifted < p20) * 100:.0f}% of pairs below)",
    )
    assert ok


def test_sl1_psi_decreases_during_training(report):
    psi = column(trained("sl1", 0), "psi")
    first, last = float(psi[:5].mean()), float(psi[-5:].mean())
    ok = last <= first
    report("check SL1 psi decreases", ok, f"mean psi first 5 epochs {first:.4f}, last 5 {last:.4f}")
    assert ok


def test_cli_metrics_reports_iou(report, tmp_path, capsys):
    dp.write_tensor(tmp_path / "field.pvtn", trained("sl1", 0)["maps"])
    lm = sg.LabelMap(dataset("two-phase").phase_mask, 2)
    dp.write_pgm_levels(tmp_path / "truth.pgm", sg.label_levels(lm))
    code = cli.main(["metrics", "--field", str(tmp_path / "field.pvtn"), "--truth", str(tmp_path / "truth.pgm"), "--out", str(tmp_path / "m.csv")])
    _, rows = dp.read_csv(tmp_path / "m.csv")
    best = max(float(r[2]) for r in rows if r[1] == "iou_mean")
    ok = code == 0 and best >= 0.8
    report("check CLI metrics IoU row", ok, f"exit {code}, best iou_mean {best:.3f}")
    assert ok
