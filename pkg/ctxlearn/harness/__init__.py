# Harness: run configs, datasets, checkpoints, probes, ablations, reports and the CLI
from ctxlearn.harness.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from ctxlearn.harness.datasets import Dataset, ingest_dataset
from ctxlearn.harness.probe import ProbeResult, linear_probe
from ctxlearn.harness.run_config import DatasetSpec, RunConfig, load_run_config, preset_for
