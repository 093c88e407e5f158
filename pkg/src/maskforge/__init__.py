"""maskforge: manufacture tamper-localization masks from (original, tampered) image pairs.

A two-branch fully-convolutional encoder embeds both images, the embeddings are
aligned with an MMD penalty, concatenated, and decoded at an arbitrary target scale
through cross-scale local attention + local frequency encoding; the absolute
difference of the two reconstructions yields a per-pixel tamper probability map
that is thresholded into a binary mask and post-filtered.
"""

__version__ = "0.1.0"

from .evaluation import ConfusionCounts, MetricsReport, confusion, metrics  # noqa: F401
from .ingestion import (  # noqa: F401
    DatasetManifest,
    ImagePair,
    PairRecord,
    TamperSpec,
    degrade,
    load_pair,
    scan_pairs,
    synth_pair,
)
from .model import MmmModel, ModelConfig  # noqa: F401
from .postprocess import baseline_subtract, filter_valid, white_fraction  # noqa: F401
from .superres import ScaleSpec, make_hr_coords  # noqa: F401
from .training import Checkpoint, TrainConfig, total_loss, train, validate  # noqa: F401
