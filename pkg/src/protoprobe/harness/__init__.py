"""Desk-scale validation harness: data, training and growing-data studies."""

from .data import Dataset, gen_synthetic_dataset, load_idx, save_idx, stratified_fraction
from .study import (REFERENCE_DIFFICULTY, REFERENCE_SCHEDULE, CheckpointRecord, CorrelationStudy, StudySchedule,
                    format_study_csv, reference_datasets, reference_spec, run_study)
from .train import accuracy, cosine_lr, train
