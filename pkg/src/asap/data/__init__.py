from .auxtext import CAPTION_INSTRUCTION, EXPLANATION_INSTRUCTION, AuxTextClient, remote_auxtext
from .manifest import ManifestError, load_manifest, load_samples, save_manifest, write_dataset
from .synthetic import (
    DEFAULT_MIX,
    TYPES,
    ConfigError,
    MediaSample,
    SampleLabels,
    generate_dataset,
    parse_mix,
    stub_caption,
    stub_explanation,
)

__all__ = [
    "AuxTextClient",
    "CAPTION_INSTRUCTION",
    "ConfigError",
    "DEFAULT_MIX",
    "EXPLANATION_INSTRUCTION",
    "ManifestError",
    "MediaSample",
    "SampleLabels",
    "TYPES",
    "generate_dataset",
    "load_manifest",
    "load_samples",
    "parse_mix",
    "remote_auxtext",
    "save_manifest",
    "stub_caption",
    "stub_explanation",
    "write_dataset",
]
