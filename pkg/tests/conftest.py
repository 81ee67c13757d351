"""Shared fixtures: tiny model configs and the toy-texture dataset."""

from __future__ import annotations

import numpy as np
import pytest

from cmrsynth.models import ModelConfig
from cmrsynth.preprocessing import TrainingPair
from cmrsynth.training import TrainConfig

# class intensities of the toy "real" dataset (background, RV, myo, LV)
TOY_INTENSITY = (-0.6, -0.1, 0.4, 0.8)
TOY_NOISE = 0.05
TOY_SIZE = 64


def toy_label_map(rng, size=TOY_SIZE):
    """Cartoon short-axis slice: LV disc inside a myocardial ring, RV crescent to one side."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = size / 2 + rng.uniform(-4, 4, size=2)
    r_endo = rng.uniform(6, 10)
    r_epi = r_endo + rng.uniform(3, 5)
    d = np.hypot(yy - cy, xx - cx)
    labels = np.zeros((size, size), dtype=np.uint8)
    rv_c = cx - r_epi - rng.uniform(2, 5)
    rv = ((yy - cy) / (r_epi * 1.3)) ** 2 + ((xx - rv_c) / (r_epi * 0.7)) ** 2 < 1
    labels[rv & (d >= r_epi)] = 1
    labels[(d < r_epi) & (d >= r_endo)] = 2
    labels[d < r_endo] = 3
    return labels


def toy_pairs(n=8, seed=0, size=TOY_SIZE):
    rng = np.random.default_rng(seed)
    pairs = []
    for k in range(n):
        labels = toy_label_map(rng, size)
        image = np.asarray(TOY_INTENSITY)[labels] + rng.normal(0, TOY_NOISE, labels.shape)
        pairs.append(TrainingPair(np.clip(image, -1, 1).astype(np.float32), labels, f"toy{k:02d}", "ED", 0))
    return pairs


def tiny_model_config(**overrides):
    values = dict(image_size=TOY_SIZE, base_channels=16, min_channels=8, latent_dim=16,
                  modulation_hidden_channels=16, discriminator_channels=16, discriminator_layers=3,
                  encoder_channels=8, encoder_max_channels=16)
    values.update(overrides)
    return ModelConfig(**values)


def tiny_train_config(**overrides):
    values = dict(batch_size=4, epochs=4, iteration_unit="steps", seed=0, log_every=0)
    values.update(overrides)
    return TrainConfig(**values)


@pytest.fixture(scope="session")
def toy_dataset():
    return toy_pairs()


# acceptance criteria record (number -> (title, passed, detail)); printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:2d}. {title}: {detail}")
