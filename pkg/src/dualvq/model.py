"""Desk-scale VQ-GAN-style autoencoder around the dual quantizer.

Encoder: stride-2 conv stack (one entry of ``enc_channels`` per halving)
followed by a 3x3 projection to the latent width. Decoder mirrors it with
transposed convs and a sigmoid output in [0,1]. The discriminator is a
small patch-style conv stack emitting a logit grid. The generator
objective is L1 reconstruction + quantization terms + an adaptively
weighted adversarial term; the adversarial weight is the ratio of the two
gradient norms measured at the decoder's final conv weight, clamped to
``lambda_max``. Updates alternate generator/discriminator with Adam
(beta1=0.5, beta2=0.9); the discriminator only trains from
``disc_start_step`` on, before which the adversarial weight is zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .autodiff import (
    NonFiniteError,
    ShapeError,
    Tensor,
    backward,
    conv2d,
    conv_transpose2d,
    first_nonfinite,
    l1_loss,
    leaky_relu,
    mul,
    relu,
    sigmoid,
    softplus,
    stop_gradient,
)
from .codebook import Codebook, usage_stats
from .dual_quantizer import (
    DualQuantizerState,
    SingleQuantizerState,
    make_dual_state,
    quant_loss_total,
    quantize_dual,
    quantize_single,
)
from .rng import component_rng
from .transformer import TransformerConfig

ADAM_EPS = 1e-8
LAMBDA_DELTA = 1e-6


@dataclass
class TrainConfig:
    """Model + training knobs. Defaults are the desk-scale configuration;
    paper-scale values (256x256, 16x downsampling, 256+256 codebooks,
    6-layer transformer, lr 4.5e-6, disc start 10k, weight 0.8) stay
    expressible through the same fields."""

    seed: int = 0
    steps: int = 1000
    batch: int = 8
    learning_rate: float = 1e-4
    disc_start_step: int = 500
    disc_weight: float = 0.8
    beta: float = 0.25
    lambda_max: float = 1e4
    gan_loss: str = "hinge"                 # or "bce"
    adam_beta1: float = 0.5
    adam_beta2: float = 0.9
    image_size: int = 32
    enc_channels: tuple = (24, 48)          # downsample factor = 2 ** len
    disc_channels: tuple = (16, 32)
    latent_channels: int = 8
    quantizer_mode: str = "dual"            # or "single"
    codebook_total: int = 64
    codebook_global: int | None = None      # default: total // 2
    codebook_local: int | None = None
    split_global: int = 4
    split_local: int = 4
    transformer_on: bool = True
    tf_layers: int = 2
    tf_heads: int = 2
    tf_ff_dim: int = 64
    tf_positional: bool = False
    tf_zero_residual: bool = False

    def downsample_factor(self) -> int:
        return 2 ** len(self.enc_channels)

    def resolved_codebooks(self) -> tuple[int, int]:
        kg = self.codebook_global if self.codebook_global is not None else self.codebook_total // 2
        kl = self.codebook_local if self.codebook_local is not None else self.codebook_total - kg
        return kg, kl

    def validate(self):
        for name in ("steps", "batch", "image_size", "latent_channels", "codebook_total",
                     "tf_layers", "tf_heads", "tf_ff_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"config field {name} must be positive, got {getattr(self, name)}")
        for name in ("learning_rate", "beta", "lambda_max"):
            if getattr(self, name) <= 0:
                raise ValueError(f"config field {name} must be positive, got {getattr(self, name)}")
        if self.disc_start_step < 0 or self.disc_weight < 0:
            raise ValueError("disc_start_step and disc_weight must be non-negative")
        if self.gan_loss not in ("hinge", "bce"):
            raise ValueError(f"gan_loss must be 'hinge' or 'bce', got {self.gan_loss!r}")
        if self.quantizer_mode not in ("dual", "single"):
            raise ValueError(f"quantizer_mode must be 'dual' or 'single', got {self.quantizer_mode!r}")
        f = self.downsample_factor()
        if self.image_size % f != 0:
            raise ValueError(f"image_size {self.image_size} not divisible by downsample factor {f}")
        if self.quantizer_mode == "dual":
            if self.split_global + self.split_local != self.latent_channels:
                raise ValueError(
                    f"channel split {self.split_global}+{self.split_local} does not equal "
                    f"latent_channels {self.latent_channels}"
                )
            if self.split_global < 1 or self.split_local < 1:
                raise ValueError("both split widths must be at least 1")
            kg, kl = self.resolved_codebooks()
            if kg + kl != self.codebook_total:
                raise ValueError(
                    f"codebook_global {kg} + codebook_local {kl} != codebook_total {self.codebook_total}"
                )
            if kg < 1 or kl < 1:
                raise ValueError("both codebooks need at least one entry")
            if self.transformer_on and self.split_global % self.tf_heads != 0:
                raise ValueError(
                    f"split_global {self.split_global} not divisible by tf_heads {self.tf_heads}"
                )

    def to_dict(self) -> dict:
        out = {}
        for f_ in fields(self):
            v = getattr(self, f_.name)
            out[f_.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kwargs = dict(d)
        for name in ("enc_channels", "disc_channels"):
            if name in kwargs and kwargs[name] is not None:
                kwargs[name] = tuple(kwargs[name])
        return cls(**kwargs)


@dataclass
class StepReport:
    step: int
    l_rec: float
    l_quant_g: float
    l_quant_l: float
    lambda_: float
    d_loss: float
    perplexity_g: float
    perplexity_l: float
    active_g: float
    active_l: float

    CSV_COLUMNS = ("step", "l_rec", "l_quant_g", "l_quant_l", "lambda", "d_loss",
                   "perplexity_g", "perplexity_l", "active_g", "active_l")

    def csv_values(self):
        return (self.step, self.l_rec, self.l_quant_g, self.l_quant_l, self.lambda_,
                self.d_loss, self.perplexity_g, self.perplexity_l, self.active_g, self.active_l)


class ModelState:
    """Everything the training loop owns: parameters, quantizer, optimizer
    moments, and the step counter."""

    def __init__(self, config: TrainConfig):
        config.validate()
        self.config = config
        self.step = 0
        self.gen_params: dict[str, Tensor] = {}
        self.disc_params: dict[str, Tensor] = {}
        self.quantizer: DualQuantizerState | SingleQuantizerState | None = None
        self.adam_m: dict[str, np.ndarray] = {}
        self.adam_v: dict[str, np.ndarray] = {}
        self.adam_t_gen = 0
        self.adam_t_disc = 0

    def all_params(self):
        yield from self.gen_params.items()
        yield from self.disc_params.items()

    def zero_grads(self):
        for _, p in self.all_params():
            p.grad = None

    def init_adam(self):
        for name, p in self.all_params():
            self.adam_m[name] = np.zeros_like(p.data)
            self.adam_v[name] = np.zeros_like(p.data)


def _conv_param(rng, c_out, c_in, k):
    fan_in = c_in * k * k
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k))
    return w, np.zeros((1, c_out, 1, 1))


def _deconv_param(rng, c_in, c_out, k):
    fan_in = c_in * k * k
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_in, c_out, k, k))
    return w, np.zeros((1, c_out, 1, 1))


def init_model(config: TrainConfig) -> ModelState:
    """Build a fresh model; every component draws from its own seeded stream."""
    state = ModelState(config)
    seed = config.seed

    def register(group, name, arr):
        t = Tensor(arr, requires_grad=True, op=name)
        group[name] = t

    rng = component_rng(seed, "enc")
    c_prev = 3
    for i, c in enumerate(config.enc_channels):
        w, b = _conv_param(rng, c, c_prev, 4)
        register(state.gen_params, f"enc.down{i}.w", w)
        register(state.gen_params, f"enc.down{i}.b", b)
        c_prev = c
    w, b = _conv_param(rng, config.latent_channels, c_prev, 3)
    register(state.gen_params, "enc.proj.w", w)
    register(state.gen_params, "enc.proj.b", b)

    rng = component_rng(seed, "dec")
    rev = list(reversed(config.enc_channels))
    w, b = _conv_param(rng, rev[0], config.latent_channels, 3)
    register(state.gen_params, "dec.in.w", w)
    register(state.gen_params, "dec.in.b", b)
    for i in range(len(rev)):
        c_in = rev[i]
        c_out = rev[i + 1] if i + 1 < len(rev) else rev[-1]
        w, b = _deconv_param(rng, c_in, c_out, 4)
        register(state.gen_params, f"dec.up{i}.w", w)
        register(state.gen_params, f"dec.up{i}.b", b)
    w, b = _conv_param(rng, 3, rev[-1], 3)
    register(state.gen_params, "dec.out.w", w)
    register(state.gen_params, "dec.out.b", b)

    if config.quantizer_mode == "dual":
        kg, kl = config.resolved_codebooks()
        tf_cfg = TransformerConfig(layers=config.tf_layers, heads=config.tf_heads,
                                   ff_dim=config.tf_ff_dim, embed_dim=config.split_global,
                                   learned_positions=config.tf_positional)
        state.quantizer = make_dual_state(
            config.split_global, config.split_local, kg, kl, config.beta,
            config.transformer_on, tf_cfg,
            component_rng(seed, "cb_global"), component_rng(seed, "cb_local"),
            component_rng(seed, "tf"), zero_residual=config.tf_zero_residual,
        )
    else:
        cb = Codebook(config.codebook_total, config.latent_channels,
                      rng=component_rng(seed, "cb_global"))
        state.quantizer = SingleQuantizerState(cb=cb, beta=config.beta)
    for name, t in state.quantizer.named_params():
        state.gen_params[name] = t

    rng = component_rng(seed, "disc")
    c_prev = 3
    for i, c in enumerate(config.disc_channels):
        w, b = _conv_param(rng, c, c_prev, 4)
        register(state.disc_params, f"disc.down{i}.w", w)
        register(state.disc_params, f"disc.down{i}.b", b)
        c_prev = c
    w, b = _conv_param(rng, 1, c_prev, 3)
    register(state.disc_params, "disc.out.w", w)
    register(state.disc_params, "disc.out.b", b)

    state.init_adam()
    return state


# -- forward passes ----------------------------------------------------------


def encode(state: ModelState, x: Tensor) -> Tensor:
    cfg = state.config
    f = cfg.downsample_factor()
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"encode: need (B,3,H,W), got {x.shape}")
    if x.shape[2] % f or x.shape[3] % f:
        raise ShapeError(f"encode: extents {x.shape[2]}x{x.shape[3]} not divisible by {f}")
    h = x
    for i in range(len(cfg.enc_channels)):
        h = conv2d(h, state.gen_params[f"enc.down{i}.w"], stride=2, pad=1)
        h = relu(h + state.gen_params[f"enc.down{i}.b"])
    z = conv2d(h, state.gen_params["enc.proj.w"], stride=1, pad=1)
    return z + state.gen_params["enc.proj.b"]


def decode(state: ModelState, z_q: Tensor) -> Tensor:
    cfg = state.config
    if z_q.shape[1] != cfg.latent_channels:
        raise ShapeError(f"decode: expected {cfg.latent_channels} channels, got {z_q.shape}")
    h = conv2d(z_q, state.gen_params["dec.in.w"], stride=1, pad=1)
    h = relu(h + state.gen_params["dec.in.b"])
    for i in range(len(cfg.enc_channels)):
        h = conv_transpose2d(h, state.gen_params[f"dec.up{i}.w"], stride=2, pad=1)
        h = relu(h + state.gen_params[f"dec.up{i}.b"])
    out = conv2d(h, state.gen_params["dec.out.w"], stride=1, pad=1)
    return sigmoid(out + state.gen_params["dec.out.b"])


def discriminate(state: ModelState, x: Tensor) -> Tensor:
    cfg = state.config
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"discriminate: need (B,3,H,W), got {x.shape}")
    h = x
    for i in range(len(cfg.disc_channels)):
        h = conv2d(h, state.disc_params[f"disc.down{i}.w"], stride=2, pad=1)
        h = leaky_relu(h + state.disc_params[f"disc.down{i}.b"], 0.2)
    logits = conv2d(h, state.disc_params["disc.out.w"], stride=1, pad=1)
    return logits + state.disc_params["disc.out.b"]


def quantize_latents(state: ModelState, z: Tensor, update_usage: bool = True):
    """Dispatch on quantizer mode; returns (z_q, [results])."""
    if isinstance(state.quantizer, DualQuantizerState):
        z_q, res_g, res_l = quantize_dual(z, state.quantizer, update_usage=update_usage)
        return z_q, [res_g, res_l]
    z_q, res = quantize_single(z, state.quantizer, update_usage=update_usage)
    return z_q, [res]


# -- objectives ---------------------------------------------------------------


def adaptive_lambda(grad_rec_norm: float, grad_gan_norm: float,
                    delta: float = LAMBDA_DELTA, lambda_max: float = 1e4) -> float:
    """Ratio of reconstruction to adversarial gradient norms, clamped."""
    lam = grad_rec_norm / (grad_gan_norm + delta)
    return float(min(max(lam, 0.0), lambda_max))


def _gen_gan_term(d_logits_fake: Tensor, kind: str) -> Tensor:
    if kind == "bce":
        return softplus(-d_logits_fake).mean()
    return -d_logits_fake.mean()


@dataclass
class GenLosses:
    total: Tensor
    l_rec: Tensor
    gan_term: Tensor | None


def generator_losses(x: Tensor, x_hat: Tensor, d_logits_fake: Tensor | None,
                     lam: float, quant_loss: Tensor, disc_weight: float = 0.8,
                     gan_loss: str = "hinge") -> GenLosses:
    """Total generator objective: reconstruction + quantization + weighted
    adversarial term. With lam == 0 the result does not depend on the
    discriminator logits at all."""
    l_rec = l1_loss(x, x_hat)
    total = l_rec + quant_loss
    gan_term = None
    if d_logits_fake is not None and lam != 0.0:
        gan_term = _gen_gan_term(d_logits_fake, gan_loss)
        total = total + mul(gan_term, lam * disc_weight)
    return GenLosses(total=total, l_rec=l_rec, gan_term=gan_term)


def discriminator_loss(d_real: Tensor, d_fake: Tensor, gan_loss: str = "hinge") -> Tensor:
    if gan_loss == "bce":
        return 0.5 * (softplus(-d_real).mean() + softplus(d_fake).mean())
    return 0.5 * (relu(1.0 - d_real).mean() + relu(1.0 + d_fake).mean())


# -- optimization --------------------------------------------------------------


def _adam_group(state: ModelState, params: dict[str, Tensor], t: int) -> int:
    cfg = state.config
    t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        m = state.adam_m[name]
        v = state.adam_v[name]
        m *= b1
        v *= b2
        if p.grad is not None:
            m += (1.0 - b1) * p.grad
            v += (1.0 - b2) * (p.grad * p.grad)
        p.data -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return t


def _grad_norm(p: Tensor) -> float:
    if p.grad is None:
        return 0.0
    return float(np.sqrt((p.grad * p.grad).sum()))


def training_step(state: ModelState, batch: np.ndarray) -> StepReport:
    """One alternating update. Generator (encoder, decoder, codebooks,
    transformer) always steps; the discriminator joins from
    ``disc_start_step`` on, which is also when the adversarial term enters
    the generator objective."""
    cfg = state.config
    x = Tensor(batch)
    z = encode(state, x)
    z_q, results = quantize_latents(state, z, update_usage=True)
    x_hat = decode(state, z_q)
    l_rec = l1_loss(x, x_hat)
    quant = quant_loss_total(results)

    use_gan = state.step >= cfg.disc_start_step
    lam = 0.0
    gan_term = None
    if use_gan:
        d_fake = discriminate(state, x_hat)
        gan_term = _gen_gan_term(d_fake, cfg.gan_loss)
        last_w = state.gen_params["dec.out.w"]
        state.zero_grads()
        backward(l_rec)
        rec_norm = _grad_norm(last_w)
        state.zero_grads()
        backward(gan_term)
        gan_norm = _grad_norm(last_w)
        lam = adaptive_lambda(rec_norm, gan_norm, LAMBDA_DELTA, cfg.lambda_max)

    total = l_rec + quant
    if gan_term is not None and lam != 0.0:
        total = total + mul(gan_term, lam * cfg.disc_weight)
    if not np.isfinite(total.data).all():
        bad = first_nonfinite(total)
        raise NonFiniteError(
            f"step {state.step}: non-finite loss; first non-finite node is "
            f"op={bad.op!r} (insertion id {bad._nid})"
        )
    state.zero_grads()
    backward(total)
    state.adam_t_gen = _adam_group(state, state.gen_params, state.adam_t_gen)

    d_loss_val = 0.0
    if use_gan:
        d_real = discriminate(state, x)
        d_fake_det = discriminate(state, stop_gradient(x_hat))
        d_loss = discriminator_loss(d_real, d_fake_det, cfg.gan_loss)
        if not np.isfinite(d_loss.data).all():
            bad = first_nonfinite(d_loss)
            raise NonFiniteError(
                f"step {state.step}: non-finite discriminator loss; first non-finite "
                f"node is op={bad.op!r} (insertion id {bad._nid})"
            )
        state.zero_grads()
        backward(d_loss)
        state.adam_t_disc = _adam_group(state, state.disc_params, state.adam_t_disc)
        d_loss_val = d_loss.item()

    state.step += 1

    if isinstance(state.quantizer, DualQuantizerState):
        res_g, res_l = results
        perp_g, act_g = usage_stats(state.quantizer.global_cb)
        perp_l, act_l = usage_stats(state.quantizer.local_cb)
        lq_g = res_g.codebook_term.item() + res_g.commitment_term.item()
        lq_l = res_l.codebook_term.item() + res_l.commitment_term.item()
    else:
        res = results[0]
        perp_g, act_g = usage_stats(state.quantizer.cb)
        perp_l, act_l = 0.0, 0.0
        lq_g = res.codebook_term.item() + res.commitment_term.item()
        lq_l = 0.0

    return StepReport(step=state.step, l_rec=l_rec.item(), l_quant_g=lq_g, l_quant_l=lq_l,
                      lambda_=lam, d_loss=d_loss_val, perplexity_g=perp_g,
                      perplexity_l=perp_l, active_g=act_g, active_l=act_l)


def reconstruct(state: ModelState, batch: np.ndarray) -> tuple[np.ndarray, np.ndarray, list]:
    """Forward pass without usage updates; returns (x_hat, z_q, results)."""
    x = Tensor(batch)
    z = encode(state, x)
    z_q, results = quantize_latents(state, z, update_usage=False)
    x_hat = decode(state, z_q)
    return x_hat.data, z_q.data, results
