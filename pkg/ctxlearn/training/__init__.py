# Training package: losses, optimizer, FLOP accounting and the multi-mask trainer
from ctxlearn.training.flops import FlopMeter, flop_report
from ctxlearn.training.losses import cls_loss, l2_masked_loss, pixel_regression_loss
from ctxlearn.training.optim import AdamW, OptimConfig, lr_at
from ctxlearn.training.trainer import CSV_COLUMNS, LossVariant, StepMetrics, TrainConfig, Trainer
