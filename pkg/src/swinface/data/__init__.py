from .align import TEMPLATE, align_face, fit_similarity
from .augment import augment, hflip
from .manifest import CATEGORIES, Dataset, ManifestRecord, load_manifest, load_manifests, write_manifest
from .sampler import CompositeBatch, compose_batch, split_sources
from .synth import SPECS, SynthSpec, generate_synthetic

__all__ = [
    "TEMPLATE", "align_face", "fit_similarity", "augment", "hflip", "CATEGORIES", "Dataset",
    "ManifestRecord", "load_manifest", "load_manifests", "write_manifest", "CompositeBatch",
    "compose_batch", "split_sources", "SPECS", "SynthSpec", "generate_synthetic",
]
