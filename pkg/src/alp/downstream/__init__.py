"""Stage 2: labeled sampling, the ALPD dataset format, finetuning and evaluation."""
from . import dataset
from .dataset import DatasetWriter, LabeledSample
from .metrics import EvalReport, confusion_matrix, iou_per_class, pixel_accuracy, rmse, to_class_ids
from .perception import (
    TASKS, CheckpointMismatch, PerceptionModel, build_model, check_split, eval_frames, evaluate,
    finetune, label_schedule, load_backbone, predict, report_from_predictions, sample_labeled,
)
