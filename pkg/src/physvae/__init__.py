"""Physics-augmented shift-invariant VAEs for micrograph phase segmentation."""

# cli is left out so ``python -m physvae.cli`` does not import it twice
from . import datapipe, diffgraph, imops, phys_loss, segmentation, trainer, vae_core

__version__ = "0.1.0"

__all__ = ["datapipe", "diffgraph", "imops", "phys_loss", "segmentation", "trainer", "vae_core"]
