"""Shared desk-scale overfit preset: 8 zero-noise frames, 2 targets each."""

from transrad.backbone import BackboneConfig
from transrad.detmodel import ModelConfig
from transrad.postprocess import PostprocessConfig
from transrad.raddata import SceneSpec, synth_frame
from transrad.trainer import TrainConfig

CUBE_SHAPE = (64, 64, 32)
NUM_FRAMES = 8


def overfit_records():
    spec = SceneSpec(shape=CUBE_SHAPE, num_targets=2, num_classes=3,
                     noise_level=0.0,
                     size_range=((12.0, 24.0), (12.0, 24.0), (6.0, 14.0)))
    return [synth_frame(100 + i, spec) for i in range(NUM_FRAMES)]


def overfit_model_config():
    return ModelConfig(backbone=BackboneConfig(input_channels=CUBE_SHAPE[2]),
                       num_classes=3)


def overfit_train_config(epochs=150, seed=7):
    # 8 frames / batch 4 -> 2 steps per epoch; 150 epochs = 300 steps
    return TrainConfig(epochs=epochs, batch_size=4, target_doppler=CUBE_SHAPE[2],
                       seed=seed, ema_decay=0.95, lr_init=2e-3,
                       eval_interval_epochs=0)


def overfit_post_config():
    return PostprocessConfig(score_thr=0.05)
