"""Alternating hinge-GAN training with Adam, seeded batching, checkpoints and resume.

Progress lines go to the ``cmrsynth.train`` logger in the form::

    step=<int> epoch=<int> d_loss=<float> g_adv=<float> feature_match=<float> kl=<float> g_total=<float> l1=<float>
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .losses import LossWeights, d_hinge_loss, loss_suite
from .models import ModelConfig, SpadeGAN, one_hot, reparameterize

logger = logging.getLogger("cmrsynth.train")

LOSS_COLUMNS = ("d_loss", "g_adv", "feature_match", "perceptual", "kl", "g_total", "l1")
HISTORY_NAME = "loss_history.tsv"
FINAL_NAME = "final.ckpt"
LATEST_NAME = "latest.ckpt"


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings.

    ``iteration_unit`` decides what ``epochs`` counts: full passes over the
    data ("epochs") or optimizer steps ("steps").
    """

    learning_rate: float = 2e-4
    adam_betas: tuple = (0.0, 0.9)
    batch_size: int = 32
    epochs: int = 100
    iteration_unit: str = "epochs"
    seed: int = 0
    lambda_fm: float = 10.0
    lambda_p: float = 10.0
    lambda_kl: float = 0.05
    checkpoint_every: int = 0
    use_vae: bool = False
    log_every: int = 10
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))
        errors = []
        if not self.learning_rate >= 0:
            errors.append("learning_rate must be >= 0")
        if self.batch_size < 1:
            errors.append("batch_size must be >= 1")
        if self.epochs < 1:
            errors.append("epochs must be >= 1")
        if self.iteration_unit not in ("epochs", "steps"):
            errors.append("iteration_unit must be 'epochs' or 'steps'")
        if self.checkpoint_every < 0:
            errors.append("checkpoint_every must be >= 0")
        if self.dtype not in ("float32", "float64"):
            errors.append("dtype must be float32 or float64")
        if errors:
            raise ValueError("invalid TrainConfig: " + "; ".join(errors))

    @property
    def loss_weights(self):
        return LossWeights(self.lambda_fm, self.lambda_p, self.lambda_kl)

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainState:
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    rng: torch.Generator
    step: int = 0
    running: dict = field(default_factory=dict)


def build_model(model_config, train_config):
    """Seeded model construction; initialization is independent of global RNG state."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(train_config.seed)
        model = SpadeGAN(model_config)
    return model.to(train_config.torch_dtype)


def init_state(model, train_config):
    def adam(params):
        return torch.optim.Adam(params, lr=train_config.learning_rate, betas=train_config.adam_betas)

    return TrainState(
        opt_g=adam(model.generator_parameters()),
        opt_d=adam(model.discriminator.parameters()),
        rng=torch.Generator().manual_seed(train_config.seed),
    )


def batch_tensors(batch, num_classes, dtype=torch.float32):
    images = torch.as_tensor(np.stack([p.image for p in batch]), dtype=dtype)[:, None]
    labels = torch.as_tensor(np.stack([p.label for p in batch]).astype(np.int64))
    return images, one_hot(labels, num_classes, dtype=dtype)


def _check_finite(losses, step):
    for name, value in losses.items():
        value = float(value.detach())
        if not math.isfinite(value):
            raise NonFiniteLossError(f"non-finite loss term {name!r} at step {step}: {value}")


def generate(model, real, mask, rng):
    """Fake batch plus (mu, logvar) when the style encoder is active."""
    if model.encoder is not None:
        mu, logvar = model.encoder(real)
        z = reparameterize(mu, logvar, rng)
        latent = (mu, logvar)
    else:
        z = model.sample_latent(real.shape[0], rng, dtype=real.dtype)
        latent = None
    return model.generator(z, mask), latent


def train_step(model, state, batch, train_config, extractor=None):
    """One discriminator update followed by one generator (+encoder) update.

    Mutates ``model`` parameters and ``state`` in place and returns the loss
    record for the step.
    """
    if not batch:
        raise ValueError("empty batch")
    model.train()
    real, mask = batch_tensors(batch, model.config.num_classes, train_config.torch_dtype)
    fake, latent = generate(model, real, mask, state.rng)

    # discriminator: fakes detached from the generator graph
    d_real = model.discriminator(real, mask)
    d_fake = model.discriminator(fake.detach(), mask)
    d_loss = d_hinge_loss(d_real, d_fake)
    _check_finite({"d_loss": d_loss}, state.step)
    state.opt_d.zero_grad(set_to_none=True)
    d_loss.backward()
    state.opt_d.step()

    # generator: discriminator frozen
    for p in model.discriminator.parameters():
        p.requires_grad_(False)
    try:
        with torch.no_grad():
            d_real = model.discriminator(real, mask)
        d_fake = model.discriminator(fake, mask)
        losses = loss_suite(d_real, d_fake, latent, train_config.loss_weights,
                            real=real, fake=fake, extractor=extractor)
        losses["d_loss"] = d_loss.detach()
        _check_finite(losses, state.step)
        state.opt_g.zero_grad(set_to_none=True)
        losses["g_total"].backward()
        state.opt_g.step()
    finally:
        for p in model.discriminator.parameters():
            p.requires_grad_(True)

    state.step += 1
    record = {k: float(losses[k].detach()) for k in LOSS_COLUMNS if k != "l1"}
    record["l1"] = float((fake.detach() - real).abs().mean())
    for k, v in record.items():
        prev = state.running.get(k)
        state.running[k] = v if prev is None else 0.9 * prev + 0.1 * v
    record["step"] = state.step
    return record


def steps_per_epoch(n_pairs, batch_size):
    """Full batches per epoch; a dataset smaller than one batch forms a single short batch."""
    return max(n_pairs // batch_size, 1)


def epoch_batches(pairs, train_config, epoch):
    order = np.random.default_rng([train_config.seed, epoch]).permutation(len(pairs))
    bs = min(train_config.batch_size, len(pairs))
    n = steps_per_epoch(len(pairs), train_config.batch_size)
    return [[pairs[i] for i in order[k * bs:(k + 1) * bs]] for k in range(n)]


def total_steps(n_pairs, train_config):
    if train_config.iteration_unit == "steps":
        return train_config.epochs
    return train_config.epochs * steps_per_epoch(n_pairs, train_config.batch_size)


def save_checkpoint(path, model, state, model_config, train_config, extra_meta=None):
    arrays = ckpt.model_arrays(model)
    arrays.update(ckpt.optimizer_arrays(state.opt_g, [n for n, _ in ckpt.named_params(model, "g")], "g"))
    arrays.update(ckpt.optimizer_arrays(state.opt_d, [n for n, _ in ckpt.named_params(model, "d")], "d"))
    arrays["rng/torch"] = state.rng.get_state().numpy()
    meta = {
        "model_config": model_config.to_dict(),
        "train_config": train_config.to_dict(),
        "step": state.step,
        "running": state.running,
    }
    meta.update(extra_meta or {})
    ckpt.save_container(path, arrays, meta)


def load_checkpoint(path, model_config=None, train_config=None):
    """Rebuild (model, state, model_config, train_config, meta) from a checkpoint.

    Passing configs checks the stored weights against them; any shape
    difference raises CheckpointError.
    """
    arrays, meta = ckpt.load_container(path)
    stored_model = model_config_from_dict(meta["model_config"])
    stored_train = train_config_from_dict(meta["train_config"])
    model_config = model_config or stored_model
    train_config = train_config or stored_train
    model = build_model(model_config, train_config)
    ckpt.load_model_arrays(model, arrays)
    state = init_state(model, train_config)
    ckpt.load_optimizer_arrays(state.opt_g, [n for n, _ in ckpt.named_params(model, "g")], "g", arrays)
    ckpt.load_optimizer_arrays(state.opt_d, [n for n, _ in ckpt.named_params(model, "d")], "d", arrays)
    state.rng.set_state(torch.from_numpy(arrays["rng/torch"].copy()))
    state.step = int(meta["step"])
    state.running = dict(meta.get("running", {}))
    return model, state, model_config, train_config, meta


def model_config_from_dict(d):
    return ModelConfig(**d)


def train_config_from_dict(d):
    d = dict(d)
    d["adam_betas"] = tuple(d["adam_betas"])
    return TrainConfig(**d)


def _write_history(path, records, append):
    mode = "a" if append else "w"
    with open(path, mode, encoding="utf-8") as fh:
        if not append:
            fh.write("step\t" + "\t".join(LOSS_COLUMNS) + "\n")
        for r in records:
            fh.write(f"{r['step']}\t" + "\t".join(repr(r[k]) for k in LOSS_COLUMNS) + "\n")


def read_history(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    cols = lines[0].split("\t")
    out = []
    for line in lines[1:]:
        vals = line.split("\t")
        rec = {c: float(v) for c, v in zip(cols, vals)}
        rec["step"] = int(rec["step"])
        out.append(rec)
    return out


def _truncate_history(path, step):
    if not Path(path).exists():
        _write_history(path, [], append=False)
        return
    kept = [r for r in read_history(path) if r["step"] <= step]
    _write_history(path, kept, append=False)
    _write_history(path, [], append=True)


def _log(record, epoch):
    logger.info(
        "step=%d epoch=%d " + " ".join(f"{k}=%.6g" for k in LOSS_COLUMNS if k != "perceptual"),
        record["step"], epoch, *(record[k] for k in LOSS_COLUMNS if k != "perceptual"),
    )


def train(pairs, model_config, train_config, out_dir=None, resume=True, max_steps=None, extractor=None):
    """Train on TrainingPair objects; returns (model, state, history).

    With ``out_dir`` set, writes ``loss_history.tsv``, periodic
    ``checkpoints/step_XXXXXXXX.ckpt``, ``latest.ckpt`` and ``final.ckpt``;
    when ``resume`` is true an existing ``latest.ckpt`` is continued.
    ``max_steps`` stops early (used to simulate interruption).
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("empty dataset")
    if train_config.use_vae != model_config.use_vae:
        raise ValueError("use_vae differs between TrainConfig and ModelConfig")
    out_dir = Path(out_dir) if out_dir is not None else None
    latest = out_dir / LATEST_NAME if out_dir is not None else None

    if latest is not None and resume and latest.exists():
        model, state, _, _, _ = load_checkpoint(latest, model_config, train_config)
        logger.info("resumed from %s at step %d", latest, state.step)
    else:
        model = build_model(model_config, train_config)
        state = init_state(model, train_config)

    history_path = out_dir / HISTORY_NAME if out_dir is not None else None
    if history_path is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        if state.step:
            _truncate_history(history_path, state.step)
        else:
            _write_history(history_path, [], append=False)

    n_steps = total_steps(len(pairs), train_config)
    if max_steps is not None:
        n_steps = min(n_steps, max_steps)
    per_epoch = steps_per_epoch(len(pairs), train_config.batch_size)
    history = []
    while state.step < n_steps:
        epoch, offset = divmod(state.step, per_epoch)
        batches = epoch_batches(pairs, train_config, epoch)
        for batch in batches[offset:]:
            if state.step >= n_steps:
                break
            record = train_step(model, state, batch, train_config, extractor)
            record["epoch"] = epoch
            history.append(record)
            if history_path is not None:
                _write_history(history_path, [record], append=True)
            if train_config.log_every and state.step % train_config.log_every == 0:
                _log(record, epoch)
            if out_dir is not None and train_config.checkpoint_every and state.step % train_config.checkpoint_every == 0:
                path = out_dir / "checkpoints" / f"step_{state.step:08d}.ckpt"
                save_checkpoint(path, model, state, model_config, train_config)
                save_checkpoint(latest, model, state, model_config, train_config)

    if out_dir is not None:
        save_checkpoint(latest, model, state, model_config, train_config)
        save_checkpoint(out_dir / FINAL_NAME, model, state, model_config, train_config)
    return model, state, history
