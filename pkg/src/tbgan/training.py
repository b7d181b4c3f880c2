"""WGAN-GP + auxiliary-classifier losses, the alternating update and checkpointing."""
import csv
from dataclasses import asdict, dataclass, fields
import logging
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .arch import growth_schedule, save_checkpoint
from .errors import ConfigError, DivergenceError, InputError

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lambda_gp: float = 10.0
    n_critic: int = 1
    lr_g: float = 1e-3
    lr_d: float = 1e-3
    beta1: float = 0.0
    beta2: float = 0.99
    eps: float = 1e-8
    batch_size: int = 16
    batch_size_per_level: list = None
    total_images: int = 800_000
    fade_images: int = 8000
    stable_images: int = 8000
    initial_level: int = 0
    seed: int = 0
    checkpoint_interval: int = 1000
    ema_beta: float = None  # accepted for config compatibility; not applied

    def __post_init__(self):
        if self.lambda_gp < 0:
            raise ConfigError("lambda_gp must be non-negative")
        if self.n_critic < 1:
            raise ConfigError("n_critic must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")

    def batch_for_level(self, level):
        if self.batch_size_per_level and level < len(self.batch_size_per_level):
            return int(self.batch_size_per_level[level])
        return self.batch_size

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class LossReport:
    g_adv: float
    d_adv: float
    gp_term: float
    g_class: float
    d_class: float
    wasserstein_estimate: float

    def is_finite(self):
        return all(math.isfinite(v) for v in asdict(self).values())


def _score(out):
    return out[0] if isinstance(out, tuple) else out


def gradient_penalty(D, real, fake, rng=None, growth=None, alpha=None):
    """Mean over the batch of ``(||grad D(mix)||_2 - 1)**2``.

    ``mix = alpha * fake + (1 - alpha) * real`` with one ``alpha ~ U[0, 1]``
    per sample (drawn from ``rng`` unless given) applied to all channels.
    """
    if real.shape != fake.shape:
        raise InputError("real and fake batches differ in shape")
    if alpha is None:
        alpha = torch.rand(real.shape[0], generator=rng, dtype=real.dtype)
    alpha = torch.as_tensor(alpha, dtype=real.dtype).view(-1, *([1] * (real.dim() - 1)))
    mixed = (alpha * fake.detach() + (1 - alpha) * real.detach()).requires_grad_(True)
    if growth is None:
        score = _score(D(mixed))
    else:
        score = _score(D(mixed, growth.level, growth.blend))
    (grad,) = torch.autograd.grad(score.sum(), mixed, create_graph=True)
    norms = torch.linalg.vector_norm(grad.flatten(1), dim=1)
    if not torch.isfinite(norms).all():
        raise DivergenceError(
            f"non-finite critic gradient (norms={norms.detach().tolist()})")
    return ((norms - 1.0) ** 2).mean()


def cross_entropy(logits, labels):
    """Mean soft-label cross entropy ``-sum_e p_e log softmax(logits)_e``."""
    labels = torch.as_tensor(labels, dtype=logits.dtype)
    lab = labels.detach().cpu().numpy()
    if (lab < -1e-6).any() or (np.abs(lab.sum(axis=-1) - 1.0) > 1e-6).any():
        raise InputError("expression labels must lie on the probability simplex")
    return -(labels * F.log_softmax(logits, dim=-1)).sum(dim=-1).mean()


def expression_condition_losses(real_logits, fake_logits, p, real_labels=None):
    """Auxiliary-classifier terms ``(g_class, d_class)`` as negative log-likelihoods."""
    if real_logits.shape[0] != (p.shape[0] if real_labels is None else real_labels.shape[0]) \
            or fake_logits.shape[0] != p.shape[0]:
        raise InputError("logits and labels differ in batch size")
    real_labels = p if real_labels is None else real_labels
    fake_ce = cross_entropy(fake_logits, p)
    d_class = cross_entropy(real_logits, real_labels) + fake_ce
    return fake_ce, d_class


def _call(net, x, growth):
    return net(x, growth.level, growth.blend)


def discriminator_objective(G, D, real, z, p, lambda_gp, growth, real_labels=None,
                            rng=None, alpha=None):
    """Critic loss terms as tensors: ``(total, d_adv, gp, d_class, w_estimate)``."""
    with torch.no_grad():
        fake = G(z, p, growth.level, growth.blend)
    real_score, real_logits = _call(D, real, growth)
    fake_score, fake_logits = _call(D, fake, growth)
    gp = gradient_penalty(D, real, fake, rng, growth, alpha)
    w_est = real_score.mean() - fake_score.mean()
    d_adv = -w_est + lambda_gp * gp
    if D.config.n_expressions:
        _, d_class = expression_condition_losses(real_logits, fake_logits, p, real_labels)
    else:
        d_class = torch.zeros((), dtype=real.dtype)
    return d_adv + d_class, d_adv, gp, d_class, w_est


def generator_objective(G, D, z, p, growth):
    """Generator loss terms as tensors: ``(total, g_adv, g_class)``."""
    fake = G(z, p, growth.level, growth.blend)
    score, logits = _call(D, fake, growth)
    g_adv = -score.mean()
    if D.config.n_expressions:
        g_class = cross_entropy(logits, p)
    else:
        g_class = torch.zeros((), dtype=fake.dtype)
    return g_adv + g_class, g_adv, g_class


def adversarial_losses(D, G, real, z, p, lambda_gp, growth, real_labels=None,
                       rng=None, alpha=None):
    """Evaluate every loss term without updating either network."""
    _, d_adv, gp, d_class, w_est = discriminator_objective(
        G, D, real, z, p, lambda_gp, growth, real_labels, rng, alpha)
    _, g_adv, g_class = generator_objective(G, D, z, p, growth)
    return _report(g_adv, d_adv, gp, g_class, d_class, w_est)


def _report(*terms):
    return LossReport(*(float(t.detach()) for t in terms))


# ---------------------------------------------------------------------------
# Training state and loop


def prepare_real(x, growth, L):
    """Downsample full-resolution reals to the growth level, fading like the networks."""
    factor = 2 ** (L - growth.level)
    xk = F.avg_pool2d(x, factor) if factor > 1 else x
    if growth.blend < 1.0 and growth.level > 0:
        low = F.interpolate(F.avg_pool2d(xk, 2), scale_factor=2, mode="nearest")
        xk = low + growth.blend * (xk - low)
    return xk


def make_optimizers(G, D, config):
    betas = (config.beta1, config.beta2)
    opt_g = torch.optim.Adam(G.parameters(), lr=config.lr_g, betas=betas, eps=config.eps)
    opt_d = torch.optim.Adam(D.parameters(), lr=config.lr_d, betas=betas, eps=config.eps)
    return opt_g, opt_d


class TrainState:
    """Networks, optimizers and the random stream of one training run."""

    def __init__(self, G, D, config):
        self.G = G
        self.D = D
        self.config = config
        self.opt_g, self.opt_d = make_optimizers(G, D, config)
        self.rng = torch.Generator().manual_seed(config.seed)
        self.step = 0
        self.images_seen = 0
        self.last_checkpoint = None

    def extra_state(self):
        return {"opt_g": self.opt_g.state_dict(), "opt_d": self.opt_d.state_dict(),
                "rng": self.rng.get_state(), "step": self.step,
                "images_seen": self.images_seen}

    def restore(self, blob):
        self.opt_g.load_state_dict(blob["opt_g"])
        self.opt_d.load_state_dict(blob["opt_d"])
        self.rng.set_state(blob["rng"])
        self.step = blob["step"]
        self.images_seen = blob["images_seen"]


def _set_requires_grad(module, flag):
    for p in module.parameters():
        p.requires_grad_(flag)


def train_step(state, real, labels, growth):
    """``n_critic`` critic updates followed by one generator update.

    ``real`` must already be at the growth level's resolution. Generated
    samples are conditioned on the labels of the real batch.
    """
    cfg = state.config
    G, D = state.G, state.D
    dtype = next(G.parameters()).dtype
    real = real.to(dtype)
    labels = torch.as_tensor(labels, dtype=dtype)
    batch = real.shape[0]
    latent_dim = G.config.latent_dim

    _set_requires_grad(G, False)
    _set_requires_grad(D, True)
    for _ in range(cfg.n_critic):
        z = torch.randn(batch, latent_dim, generator=state.rng, dtype=dtype)
        total, d_adv, gp, d_class, w_est = discriminator_objective(
            G, D, real, z, labels, cfg.lambda_gp, growth, rng=state.rng)
        if not torch.isfinite(total):
            raise DivergenceError(f"critic loss is {float(total.detach())} at step {state.step}",
                                  state.last_checkpoint)
        state.opt_d.zero_grad(set_to_none=True)
        total.backward()
        state.opt_d.step()

    _set_requires_grad(G, True)
    _set_requires_grad(D, False)
    z = torch.randn(batch, latent_dim, generator=state.rng, dtype=dtype)
    g_total, g_adv, g_class = generator_objective(G, D, z, labels, growth)
    if not torch.isfinite(g_total):
        raise DivergenceError(f"generator loss is {float(g_total)} at step {state.step}",
                              state.last_checkpoint)
    state.opt_g.zero_grad(set_to_none=True)
    g_total.backward()
    state.opt_g.step()
    _set_requires_grad(D, True)

    state.step += 1
    state.images_seen += batch
    report = _report(g_adv, d_adv, gp, g_class, d_class, w_est)
    if not report.is_finite():
        raise DivergenceError(f"non-finite loss report at step {state.step}: {report}",
                              state.last_checkpoint)
    return report


LOG_FIELDS = ["step", "level", "blend", "images_seen"] + [f.name for f in fields(LossReport)]


class TrainingLog:
    """Append-only CSV of per-step losses."""

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists():
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(LOG_FIELDS)

    def append(self, step, growth, images_seen, report):
        row = [step, growth.level, repr(growth.blend), images_seen]
        row += [repr(v) for v in asdict(report).values()]
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow(row)


def train(state, data, labels, steps, log_path=None, checkpoint_dir=None, train_meta=None,
          on_step=None):
    """Run ``steps`` training steps on an in-memory dataset.

    ``data`` is an ``N x 9 x H x W`` tensor at the final resolution and
    ``labels`` an ``N x n_expressions`` tensor. Returns the loss reports.
    """
    cfg = state.config
    arch = state.G.config
    log = TrainingLog(log_path) if log_path else None
    reports = []
    n = data.shape[0]
    for _ in range(steps):
        growth = growth_schedule(state.images_seen, arch, cfg.fade_images, cfg.stable_images,
                                 cfg.initial_level)
        batch = cfg.batch_for_level(growth.level)
        idx = torch.randint(n, (batch,), generator=state.rng)
        real = prepare_real(data[idx], growth, arch.L)
        report = train_step(state, real, labels[idx], growth)
        reports.append(report)
        if log:
            log.append(state.step, growth, state.images_seen, report)
        if on_step:
            on_step(state, growth, report)
        if checkpoint_dir and cfg.checkpoint_interval and state.step % cfg.checkpoint_interval == 0:
            write_training_checkpoint(state, checkpoint_dir, growth, train_meta)
    return reports


def write_training_checkpoint(state, checkpoint_dir, growth, train_meta=None):
    checkpoint_dir = Path(checkpoint_dir)
    checkpoint_dir.mkdir(parents=True, exist_ok=True)
    path = checkpoint_dir / f"step-{state.step:08d}"
    save_checkpoint(path, state.G, state.D, state.G.config, growth, state.step,
                    state.extra_state(), train_meta)
    tmp = checkpoint_dir / "latest.tmp"
    tmp.write_text(path.name + "\n")
    tmp.replace(checkpoint_dir / "latest")
    state.last_checkpoint = str(path)
    return path


# ---------------------------------------------------------------------------
# Gradient verification


def _shift(params, dirs, amount):
    with torch.no_grad():
        for p, d in zip(params, dirs):
            p.add_(amount * d)


def grad_check(loss_fn, params, n_directions=16, step=1e-6, seed=0):
    """Worst relative error between autograd and central-difference directional derivatives.

    ``loss_fn()`` must return a scalar tensor computed from ``params``
    (leaf tensors, ideally float64). Directions are random unit vectors
    over all parameters jointly.
    """
    params = [p for p in params]
    gen = torch.Generator().manual_seed(seed)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(params, grads)]
    worst = 0.0
    for _ in range(n_directions):
        dirs = [torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype) for p in params]
        norm = math.sqrt(sum(float((d.double() ** 2).sum()) for d in dirs))
        dirs = [d / norm for d in dirs]
        analytic = sum(float((g.double() * d.double()).sum()) for g, d in zip(grads, dirs))
        # Losses are evaluated with autograd enabled: some (the gradient
        # penalty) differentiate internally.
        _shift(params, dirs, step)
        f_plus = float(loss_fn().detach())
        _shift(params, dirs, -2 * step)
        f_minus = float(loss_fn().detach())
        _shift(params, dirs, step)
        numeric = (f_plus - f_minus) / (2 * step)
        denom = max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst
