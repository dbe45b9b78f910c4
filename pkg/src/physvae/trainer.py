"""Deterministic training loop for the shift-invariant VAE with physics losses.

Every random draw is derived from ``(seed, epoch, batch)`` through numpy's
SeedSequence, so a run resumed from a checkpoint reproduces an uninterrupted
run bit for bit.
"""

from __future__ import annotations

import json
import logging
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffgraph as dg
from . import phys_loss, segmentation, vae_core
from .datapipe import FormatError, PatchSet, _atomic_write, write_csv, write_pgm, write_pgm_levels
from .phys_loss import PhysicsLossConfig
from .segmentation import LatentField

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"PVAE"
CHECKPOINT_VERSION = 1
METRIC_COLUMNS = ["epoch", "beta", "vae_loss", "psi", "total_loss", "wall_ms", "recon", "kl"]

# stream tags mixed into the seed sequence
_INIT, _SHUFFLE, _EPS = 0, 1, 2


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, checkpoint: str | None):
        super().__init__(f"{message}; last good checkpoint: {checkpoint or 'none'}")
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class BetaSchedule:
    beta_start: float = 0.05
    beta_end: float = 1.0
    ramp_epochs: int = 50
    total_epochs: int = 50

    def __post_init__(self):
        if self.beta_start < 0 or self.beta_end < 0:
            raise ValueError("beta values must be >= 0")
        if self.ramp_epochs < 1:
            raise ValueError("ramp_epochs must be >= 1")
        if self.total_epochs < self.ramp_epochs:
            raise ValueError("total_epochs must be >= ramp_epochs")

    def __call__(self, epoch: int) -> float:
        frac = min(epoch / self.ramp_epochs, 1.0)
        return self.beta_start + (self.beta_end - self.beta_start) * frac


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if min(self.learning_rate, self.adam_eps) <= 0:
            raise ValueError("learning rate and eps must be > 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")


@dataclass(frozen=True)
class ModelConfig:
    n_content: int = 2
    k: float = 0.5
    hidden: tuple[int, ...] = (128, 128)
    decoder_hidden: tuple[int, ...] | None = None
    likelihood: str = "bernoulli"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    block_grid: tuple[int, int] = (16, 16)
    schedule: BetaSchedule = field(default_factory=BetaSchedule)
    physics: PhysicsLossConfig = field(default_factory=PhysicsLossConfig)
    optimizer: AdamConfig = field(default_factory=AdamConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    snapshot_every: int = 0
    snapshot_denoise: float = 0.1
    log_wall_time: bool = False
    # epochs trained on the plain VAE loss before the physics term is applied
    physics_warmup: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.physics_warmup < 0:
            raise ValueError("physics_warmup must be >= 0")
        if min(self.block_grid) < 1:
            raise ValueError("block grid extents must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        phys = dict(d.pop("physics", {}))
        if "central_window" in phys:
            phys["central_window"] = tuple(phys["central_window"])
        if phys.get("map_mask") is not None:
            phys["map_mask"] = tuple(phys["map_mask"])
        model = dict(d.pop("model", {}))
        for key in ("hidden", "decoder_hidden"):
            if model.get(key) is not None:
                model[key] = tuple(model[key])
        if "block_grid" in d:
            d["block_grid"] = tuple(d["block_grid"])
        return cls(
            schedule=BetaSchedule(**d.pop("schedule", {})),
            physics=PhysicsLossConfig(**phys),
            optimizer=AdamConfig(**d.pop("optimizer", {})),
            model=ModelConfig(**model),
            **d,
        )


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *tags])


# --------------------------------------------------------------- batching


def block_bounds(n: int, parts: int) -> np.ndarray:
    """Even split of ``range(n)`` into ``parts`` contiguous blocks."""
    return np.array([i * n // parts for i in range(parts + 1)])


def block_members(grid_shape: tuple[int, int], block_grid: tuple[int, int]) -> list[np.ndarray]:
    """Flat patch indices of every spatial block, row-major block order."""
    gh, gw = grid_shape
    bh, bw = block_grid
    if bh > gh or bw > gw:
        raise ValueError(f"block grid {block_grid} leaves empty blocks on patch grid {grid_shape}")
    rb, cb = block_bounds(gh, bh), block_bounds(gw, bw)
    blocks = []
    for u in range(bh):
        for v in range(bw):
            rows = np.arange(rb[u], rb[u + 1])
            cols = np.arange(cb[v], cb[v + 1])
            idx = (rows[:, None] * gw + cols[None, :]).ravel()
            if idx.size == 0:
                raise ValueError(f"block ({u}, {v}) is empty")
            blocks.append(idx)
    return blocks


@dataclass
class EpochBatches:
    physics: list[np.ndarray]  # each (b_h * b_w,), one index per block
    leftover: list[np.ndarray]  # VAE-only batches


def stratified_batches(
    grid_shape: tuple[int, int],
    block_grid: tuple[int, int],
    rng: np.random.Generator,
    leftover_chunk: int | None = None,
) -> EpochBatches:
    """One patch per block per batch, sampled without replacement.

    The epoch yields ``min block size`` stratified batches; patches not drawn
    are returned as VAE-only batches of at most ``leftover_chunk`` (default
    ``b_h * b_w``) indices.
    """
    blocks = block_members(grid_shape, block_grid)
    perms = [rng.permutation(b) for b in blocks]
    n_batches = min(len(b) for b in blocks)
    batches = [np.array([p[t] for p in perms]) for t in range(n_batches)]
    rest = np.concatenate([p[n_batches:] for p in perms]) if perms else np.array([], dtype=int)
    rest = rng.permutation(rest)
    chunk = leftover_chunk or len(blocks)
    leftover = [rest[i : i + chunk] for i in range(0, rest.size, chunk)]
    return EpochBatches(batches, leftover)


# -------------------------------------------------------------- optimizer


class Adam:
    def __init__(self, shapes, cfg: AdamConfig):
        self.cfg = cfg
        self.t = 0
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        c = self.cfg
        self.t += 1
        b1, b2 = c.adam_beta1, c.adam_beta2
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            mhat = self.m[i] / corr1
            vhat = self.v[i] / corr2
            out.append(p - c.learning_rate * mhat / (np.sqrt(vhat) + c.adam_eps))
        return out


# ------------------------------------------------------------------ state


@dataclass
class TrainState:
    params: vae_core.ModelParams
    adam: Adam
    next_epoch: int
    seed: int
    history: list[list[float]] = field(default_factory=list)
    config: dict | None = None


@dataclass
class BatchRecord:
    epoch: int
    physics: bool
    vae_loss: float
    psi: float
    total_loss: float


@dataclass
class TrainResult:
    params: vae_core.ModelParams
    history: list[list[float]]  # rows matching METRIC_COLUMNS
    batches: list[BatchRecord]
    state: TrainState

    def column(self, name: str) -> np.ndarray:
        i = METRIC_COLUMNS.index(name)
        return np.array([row[i] for row in self.history])


def init_state(cfg: TrainConfig, patch_side: int) -> TrainState:
    m = cfg.model
    params = vae_core.init_params(
        patch_side,
        vae_core.LatentLayout(n_content=m.n_content, k=m.k),
        hidden=m.hidden,
        decoder_hidden=m.decoder_hidden,
        rng=_rng(cfg.seed, _INIT),
        likelihood=m.likelihood,
    )
    adam = Adam([a.shape for a in params.arrays()], cfg.optimizer)
    return TrainState(params, adam, 0, cfg.seed, [], cfg.to_dict())


def train_step(
    params: vae_core.ModelParams,
    x: np.ndarray,
    eps: np.ndarray,
    beta: float,
    physics: PhysicsLossConfig | None,
    block_grid: tuple[int, int],
    apply_physics: bool = True,
):
    """One graph evaluation; returns (grads, vae_loss, psi, total, recon, kl).

    With ``apply_physics`` false the physics score is only measured (on the
    detached means) and the loss is the plain VAE loss.
    """
    pn = vae_core.ParamNodes(params)
    terms = vae_core.elbo_terms(pn, x, eps, beta)
    psi_val = 0.0
    total = terms.loss
    if physics is not None and not apply_physics:
        bm = phys_loss.assemble_batch_map(dg.detach(terms.code.mu), block_grid)
        psi_val = phys_loss.physics_score(bm, physics).item()
    elif physics is not None:
        bm = phys_loss.assemble_batch_map(terms.code.mu, block_grid)
        psi = phys_loss.physics_score(bm, physics)
        psi_val = psi.item()
        total = phys_loss.combined_loss(terms.loss, psi, physics)
    total_val = total.item()
    if not np.isfinite(total_val):
        return None, terms.loss.item(), psi_val, total_val, terms.recon.item(), terms.kl.item()
    dg.backward(total)
    return pn.grads(), terms.loss.item(), psi_val, total_val, terms.recon.item(), terms.kl.item()


def train(
    patchset: PatchSet,
    config: TrainConfig,
    run_dir: str | Path | None = None,
    resume: TrainState | None = None,
    stop_epoch: int | None = None,
    progress=None,
) -> TrainResult:
    """Train from scratch (or continue ``resume``) up to ``config.epochs``.

    ``stop_epoch`` ends early after that many total epochs (used to split a
    run across checkpoints).  With ``run_dir`` set, a checkpoint and the
    metrics CSV are rewritten after every epoch.
    """
    state = resume if resume is not None else init_state(config, patchset.patch_side)
    if state.params.patch_side != patchset.patch_side:
        raise dg.ContractError("checkpoint patch_side does not match the patch set")
    if resume is not None and resume.seed != config.seed:
        raise dg.ContractError("resume seed does not match config seed")
    nb = config.block_grid[0] * config.block_grid[1]
    if nb > len(patchset):
        raise ValueError(f"block grid needs {nb} patches but the set has {len(patchset)}")
    physics = config.physics if config.physics.kind != "none" else None
    schedule = config.schedule
    run_dir = Path(run_dir) if run_dir is not None else None
    ckpt_path = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        if (run_dir / "checkpoint.pvae").exists():
            ckpt_path = str(run_dir / "checkpoint.pvae")
    last_epoch = min(config.epochs, stop_epoch if stop_epoch is not None else config.epochs)
    records: list[BatchRecord] = []
    dim = state.params.layout.dim
    data = patchset.patches

    for epoch in range(state.next_epoch, last_epoch):
        t0 = time.perf_counter()
        beta = schedule(epoch)
        plan = stratified_batches(patchset.grid_shape, config.block_grid, _rng(config.seed, _SHUFFLE, epoch))
        jobs = [(b, physics) for b in plan.physics] + [(b, None) for b in plan.leftover]
        sums = np.zeros(5)  # vae, psi, total, recon, kl
        n_phys = 0
        for bi, (idx, phys) in enumerate(jobs):
            eps = _rng(config.seed, _EPS, epoch, bi).standard_normal((idx.size, dim))
            grads, vl, psi, tot, rec, kl = train_step(
                state.params, data[idx], eps, beta, phys, config.block_grid,
                apply_physics=epoch >= config.physics_warmup,
            )
            if grads is None:
                raise TrainingAborted(f"non-finite loss at epoch {epoch}, batch {bi}", ckpt_path)
            state.params = state.params.with_arrays(state.adam.step(state.params.arrays(), grads))
            records.append(BatchRecord(epoch, phys is not None, vl, psi, tot))
            sums += [vl, psi, tot, rec, kl]
            n_phys += phys is not None
        n = len(jobs)
        wall_ms = (time.perf_counter() - t0) * 1e3 if config.log_wall_time else 0.0
        row = [
            float(epoch),
            beta,
            sums[0] / n,
            sums[1] / n_phys if n_phys else 0.0,
            sums[2] / n,
            wall_ms,
            sums[3] / n,
            sums[4] / n,
        ]
        state.history.append(row)
        state.next_epoch = epoch + 1
        log.info(
            "epoch %d beta %.4f vae %.4f psi %.4f total %.4f", epoch, beta, row[2], row[3], row[4]
        )
        if progress is not None:
            progress(epoch, row)
        if run_dir is not None:
            ckpt_path = str(run_dir / "checkpoint.pvae")
            save_checkpoint(ckpt_path, state)
            write_metrics(run_dir / "metrics.csv", state.history)
            if config.snapshot_every and (epoch + 1) % config.snapshot_every == 0:
                write_snapshot(run_dir / "snapshots", epoch, embed(state.params, patchset), config.snapshot_denoise)
    return TrainResult(state.params, state.history, records, state)


def write_metrics(path, history) -> None:
    rows = [[int(r[0])] + [repr(float(v)) for v in r[1:]] for r in history]
    write_csv(path, METRIC_COLUMNS, rows)


# ------------------------------------------------------------------ embed


def embed(params: vae_core.ModelParams, patchset: PatchSet, chunk: int = 1024) -> LatentField:
    """Posterior means of every patch scattered onto the patch grid."""
    if params.patch_side != patchset.patch_side:
        raise dg.ContractError(
            f"model patch_side {params.patch_side} != patch set side {patchset.patch_side}"
        )
    gh, gw = patchset.grid_shape
    nc = params.layout.n_content
    maps = np.zeros((nc, gh, gw))
    for start in range(0, len(patchset), chunk):
        mu = vae_core.encode(params, patchset.patches[start : start + chunk]).mu.value
        rc = patchset.coords[start : start + chunk]
        maps[:, rc[:, 0], rc[:, 1]] = mu[:, 2:].T
    return LatentField(maps, (gh, gw))


def write_snapshot(directory, epoch: int, field_: LatentField, denoise: float) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    labels = segmentation.segment_pipeline(field_, denoise)
    for j, (m, lm) in enumerate(zip(field_.maps, labels)):
        guard = segmentation.flatness_guard(m)
        latent = np.zeros_like(m) if guard.flat else guard.normalized
        write_pgm(directory / f"epoch_{epoch + 1:04d}_z{j + 1}_latent.pgm", latent)
        write_pgm_levels(directory / f"epoch_{epoch + 1:04d}_z{j + 1}_labels.pgm", segmentation.label_levels(lm))


# ------------------------------------------------------------- checkpoints


def _pack_array(a: np.ndarray) -> bytes:
    a = np.asarray(a, dtype=np.float64)
    return struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape) + a.astype("<f8").tobytes()


class _Reader:
    def __init__(self, data: bytes, pos: int = 0):
        self.data, self.pos = data, pos

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise FormatError("truncated checkpoint", len(self.data))
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out

    def array(self) -> np.ndarray:
        (ndim,) = self.take("<I")
        shape = self.take(f"<{ndim}I")
        n = int(np.prod(shape, dtype=np.int64))
        if self.pos + 8 * n > len(self.data):
            raise FormatError("truncated checkpoint array", len(self.data))
        a = np.frombuffer(self.data, dtype="<f8", count=n, offset=self.pos).astype(np.float64)
        self.pos += 8 * n
        return a.reshape(shape)


def params_to_bytes(p: vae_core.ModelParams) -> bytes:
    out = CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION)
    out += struct.pack(
        "<IIdIBII",
        p.layout.n_shift,
        p.layout.n_content,
        p.layout.k,
        p.patch_side,
        0 if p.likelihood == "bernoulli" else 1,
        len(p.encoder),
        len(p.decoder),
    )
    for a in p.arrays():
        out += _pack_array(a)
    return out


def _read_params(r: _Reader) -> vae_core.ModelParams:
    if r.data[r.pos : r.pos + 4] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", r.pos)
    r.pos += 4
    (version,) = r.take("<I")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", r.pos - 4)
    n_shift, n_content, k, side, lik, n_enc, n_dec = r.take("<IIdIBII")
    arrays = [r.array() for _ in range(2 * (n_enc + n_dec))]
    enc = [(arrays[2 * i], arrays[2 * i + 1]) for i in range(n_enc)]
    dec = [(arrays[2 * (n_enc + i)], arrays[2 * (n_enc + i) + 1]) for i in range(n_dec)]
    try:
        layout = vae_core.LatentLayout(n_content=n_content, k=k, n_shift=n_shift)
        return vae_core.ModelParams(enc, dec, layout, side, "bernoulli" if lik == 0 else "mse")
    except ValueError as exc:
        raise FormatError(f"inconsistent checkpoint layout: {exc}", r.pos) from None


def save_checkpoint(path, state: TrainState) -> None:
    """Model, Adam moments, epoch counter, seed, metric history and config.

    Layout after the model block: has_state u8, next_epoch u32, seed u64,
    adam_t u64, Adam m/v arrays, history array, config JSON (u32 length +
    UTF-8), then a CRC-32 of everything before it.
    """
    out = params_to_bytes(state.params)
    out += struct.pack("<BIQQ", 1, state.next_epoch, state.seed, state.adam.t)
    for a in state.adam.m + state.adam.v:
        out += _pack_array(a)
    hist = np.array(state.history, dtype=np.float64).reshape(-1, len(METRIC_COLUMNS))
    out += _pack_array(hist)
    cfg = json.dumps(state.config or {}, sort_keys=True).encode()
    out += struct.pack("<I", len(cfg)) + cfg
    out += struct.pack("<I", zlib.crc32(out))
    _atomic_write(path, out)


def save_params(path, params: vae_core.ModelParams) -> None:
    out = params_to_bytes(params) + struct.pack("<B", 0)
    out += struct.pack("<I", zlib.crc32(out))
    _atomic_write(path, out)


def load_checkpoint(path) -> TrainState:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise FormatError("truncated checkpoint", len(data))
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    body = data[:-4]
    if zlib.crc32(body) != crc:
        raise FormatError("checkpoint checksum mismatch", len(data) - 4)
    r = _Reader(body)
    params = _read_params(r)
    (has_state,) = r.take("<B")
    if not has_state:
        if r.pos != len(body):
            raise FormatError("trailing bytes in checkpoint", r.pos)
        adam = Adam([a.shape for a in params.arrays()], AdamConfig())
        return TrainState(params, adam, 0, 0, [], None)
    next_epoch, seed, t = r.take("<IQQ")
    n = len(params.arrays())
    moments = [r.array() for _ in range(2 * n)]
    hist = r.array()
    (clen,) = r.take("<I")
    if r.pos + clen != len(body):
        raise FormatError("checkpoint length mismatch", r.pos)
    cfg = json.loads(body[r.pos : r.pos + clen].decode())
    adam_cfg = AdamConfig(**cfg["optimizer"]) if cfg and "optimizer" in cfg else AdamConfig()
    adam = Adam([a.shape for a in params.arrays()], adam_cfg)
    adam.t, adam.m, adam.v = t, moments[:n], moments[n:]
    return TrainState(params, adam, next_epoch, seed, [list(row) for row in hist], cfg)


def load_params(path) -> vae_core.ModelParams:
    return load_checkpoint(path).params
