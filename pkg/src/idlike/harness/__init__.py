"""Dataset ingestion, embedding cache, run configuration, orchestration and CLI."""

from .cache import read_cache, write_cache
from .config import RunConfig, build_config, load_config, parse_config_text
from .data import Sample, class_table, ingest_dataset, load_image, read_manifest, sample_fewshot
from .pipeline import calibrate_dump, evaluate_dump, run_experiment, run_stage

__all__ = [
    "RunConfig", "Sample", "build_config", "calibrate_dump", "class_table", "evaluate_dump",
    "ingest_dataset", "load_config", "load_image", "parse_config_text", "read_cache", "read_manifest",
    "run_experiment", "run_stage", "sample_fewshot", "write_cache",
]
