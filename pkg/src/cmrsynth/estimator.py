"""Scikit-learn style front end for the SPADE synthesizer."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .inference import encode_style, render_slices
from .models import ModelConfig
from .preprocessing import TrainingPair
from .training import TrainConfig, load_checkpoint, save_checkpoint, train
from .validation import check_consistent_shapes, check_image_array, check_label_array, check_square


class SpadeSynthesizer(BaseEstimator):
    """Label-map -> image synthesizer trained adversarially on image/mask pairs.

    ``fit(X, y)`` takes label maps ``X`` [n][H][W] and images ``y`` [n][H][W]
    in [-1, 1]. ``predict(X)`` maps label maps to images with one style
    latent shared by all inputs. ``transform(images)`` returns style latents
    (requires ``use_vae=True``).

    Extra architecture options (``min_channels``, ``discriminator_layers``,
    ...) go in ``model_options``.
    """

    def __init__(self, image_size=128, num_classes=4, base_channels=512, num_spade_blocks=None,
                 latent_dim=256, use_vae=False, modulation_hidden_channels=128,
                 discriminator_scales=2, learning_rate=2e-4, batch_size=32, epochs=100,
                 iteration_unit="epochs", lambda_fm=10.0, lambda_kl=0.05, seed=0,
                 model_options=None, output_dir=None):
        self.image_size = image_size
        self.num_classes = num_classes
        self.base_channels = base_channels
        self.num_spade_blocks = num_spade_blocks
        self.latent_dim = latent_dim
        self.use_vae = use_vae
        self.modulation_hidden_channels = modulation_hidden_channels
        self.discriminator_scales = discriminator_scales
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.iteration_unit = iteration_unit
        self.lambda_fm = lambda_fm
        self.lambda_kl = lambda_kl
        self.seed = seed
        self.model_options = model_options
        self.output_dir = output_dir

    def _configs(self):
        model_config = ModelConfig(
            num_classes=self.num_classes,
            image_size=self.image_size,
            base_channels=self.base_channels,
            num_spade_blocks=self.num_spade_blocks,
            latent_dim=self.latent_dim,
            use_vae=self.use_vae,
            modulation_hidden_channels=self.modulation_hidden_channels,
            discriminator_scales=self.discriminator_scales,
            **(self.model_options or {}),
        )
        train_config = TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            iteration_unit=self.iteration_unit,
            lambda_fm=self.lambda_fm,
            lambda_kl=self.lambda_kl,
            seed=self.seed,
            use_vae=self.use_vae,
            log_every=0,
        )
        return model_config, train_config

    def fit(self, X, y):
        labels = check_label_array(X, self.num_classes, ndim=3, name="X")
        images = check_image_array(y, ndim=3, name="y", bounded=True)
        check_consistent_shapes(images, labels, ("y", "X"))
        check_square(labels, self.image_size, "X")
        pairs = [
            TrainingPair(images[k].astype(np.float32), labels[k].astype(np.uint8), "array", "NA", k)
            for k in range(len(labels))
        ]
        model_config, train_config = self._configs()
        self.model_, self.state_, self.history_ = train(pairs, model_config, train_config, self.output_dir)
        self.model_config_ = model_config
        self.train_config_ = train_config
        self.n_features_in_ = self.image_size * self.image_size
        return self

    def sample_style(self, random_state=None):
        seed = self.seed if random_state is None else random_state
        gen = torch.Generator().manual_seed(int(seed))
        return torch.randn((self.latent_dim,), generator=gen, dtype=torch.float64).numpy()

    def predict(self, X, z=None, random_state=None):
        check_is_fitted(self, "model_")
        labels = check_label_array(X, self.num_classes, ndim=(2, 3), name="X")
        single = labels.ndim == 2
        labels = labels[None] if single else labels
        check_square(labels, self.image_size, "X")
        if z is None:
            z = self.sample_style(random_state)
        out = render_slices(self.model_, labels, z)
        return out[0] if single else out

    def transform(self, X):
        """Style latents (encoder mu) for images [n][H][W]."""
        check_is_fitted(self, "model_")
        images = check_image_array(X, ndim=(2, 3), name="X")
        images = images[None] if images.ndim == 2 else images
        return np.stack([encode_style(self.model_, img) for img in images])

    def save(self, path):
        check_is_fitted(self, "model_")
        save_checkpoint(path, self.model_, self.state_, self.model_config_, self.train_config_)

    @classmethod
    def from_checkpoint(cls, path):
        model, state, model_config, train_config, _ = load_checkpoint(path)
        known = {"min_channels", "encoder_channels", "encoder_max_channels", "discriminator_channels",
                 "discriminator_layers", "leaky_slope"}
        mc = model_config.to_dict()
        est = cls(
            image_size=mc["image_size"], num_classes=mc["num_classes"], base_channels=mc["base_channels"],
            num_spade_blocks=mc["num_spade_blocks"], latent_dim=mc["latent_dim"], use_vae=mc["use_vae"],
            modulation_hidden_channels=mc["modulation_hidden_channels"],
            discriminator_scales=mc["discriminator_scales"], learning_rate=train_config.learning_rate,
            batch_size=train_config.batch_size, epochs=train_config.epochs,
            iteration_unit=train_config.iteration_unit, lambda_fm=train_config.lambda_fm,
            lambda_kl=train_config.lambda_kl, seed=train_config.seed,
            model_options={k: mc[k] for k in known},
        )
        est.model_, est.state_, est.history_ = model, state, []
        est.model_config_, est.train_config_ = model_config, train_config
        est.n_features_in_ = est.image_size * est.image_size
        return est
