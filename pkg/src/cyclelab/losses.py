"""Loss functions: LSGAN adversarial terms, plain and noisy cycle
consistency, the guess-pair loss, and their weighted assembly.

Conventions fixed here:
  * cycle consistency is the MEAN absolute error, so weights are comparable
    across image sizes;
  * discriminator/guess score maps are averaged into scalars;
  * sigma values are intensity units on the [0,1] scale; when noise is
    applied to model-range tensors ([-1,1], twice the span) the standard
    deviation is doubled accordingly.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch

from .seeding import torch_gen

DEFENSE_MODES = ("none", "noise", "guess", "noise+guess")
GUESS_LOSS_FORMS = ("lsq", "bce")

MODEL_RANGE_SCALE = 2.0  # width of [-1,1] relative to [0,1]


@dataclass(frozen=True)
class NoiseSpec:
    """Zero-mean Gaussian perturbation; sigma in [0,1]-scale intensity."""

    sigma: float
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


@dataclass
class LossBreakdown:
    """Per-iteration generator objective terms.

    adv terms carry unit weight; cyc/guess are stored weighted with their raw
    values alongside; total always equals the sum of the weighted components.
    """

    adv_g_a: float = 0.0
    adv_g_b: float = 0.0
    cyc_a: float = 0.0
    cyc_b: float = 0.0
    guess_a: float = 0.0
    guess_b: float = 0.0
    idt_a: float = 0.0
    idt_b: float = 0.0
    total: float = 0.0
    cyc_a_raw: float = 0.0
    cyc_b_raw: float = 0.0
    guess_a_raw: float = 0.0
    guess_b_raw: float = 0.0

    @classmethod
    def csv_header(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def csv_row(self) -> list[str]:
        return [repr(getattr(self, f.name)) for f in fields(self)]


def _check_same_shape(x: torch.Tensor, y: torch.Tensor) -> None:
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")


def cycle_loss(x: torch.Tensor, x_rec: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over all pixels and channels."""
    _check_same_shape(x, x_rec)
    return (x_rec - x).abs().mean()


def perturb(y: torch.Tensor, sigma: float, gen: torch.Generator | None,
            lo: float, hi: float) -> torch.Tensor:
    """Add i.i.d. N(0, sigma) per pixel and clamp back into [lo, hi].

    sigma == 0 returns the input untouched (and draws nothing), so the noisy
    losses degenerate exactly to their clean forms.
    """
    if sigma == 0.0:
        return y
    delta = torch.randn(y.shape, generator=gen, dtype=y.dtype) * sigma
    return torch.clamp(y + delta, lo, hi)


def noisy_cycle_loss(x: torch.Tensor, translate, reconstruct, noise: NoiseSpec,
                     clamp_range: tuple[float, float] = (-1.0, 1.0)) -> torch.Tensor:
    """Cycle loss with the translation perturbed before reconstruction.

    The perturbation is drawn fresh per call but deterministically from
    noise.seed; sigma applies directly in the value space of the inputs.
    """
    y = translate(x)
    y = perturb(y, noise.sigma, torch_gen(noise.seed, "noisy_cycle"), *clamp_range)
    return cycle_loss(x, reconstruct(y))


def lsgan_losses(scores_real: torch.Tensor,
                 scores_fake: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Least-squares adversarial losses over raw patch score maps."""
    d_loss = 0.5 * ((scores_real - 1.0) ** 2).mean() + 0.5 * (scores_fake ** 2).mean()
    g_loss = ((scores_fake - 1.0) ** 2).mean()
    return d_loss, g_loss


def guess_loss(x: torch.Tensor, x_rec: torch.Tensor, guess_net, coin: int,
               form: str = "lsq") -> tuple[torch.Tensor, torch.Tensor]:
    """Losses of the pair discriminator shown (input, reconstruction) in
    coin-chosen order.

    Score semantics: higher means "first input is the reconstruction". The
    target for the net is t = coin; the generator optimizes the flipped
    target. Only x_rec carries generator gradient; the real image is a
    constant in both returned losses.
    """
    _check_same_shape(x, x_rec)
    if coin not in (0, 1):
        raise ValueError(f"coin must be 0 or 1, got {coin}")
    if form not in GUESS_LOSS_FORMS:
        raise ValueError(f"unknown guess loss form {form!r}")
    x_const = x.detach()
    first, second = (x_const, x_rec) if coin == 0 else (x_rec, x_const)
    t = float(coin)
    s_d = guess_net(first.detach(), second.detach())
    s_g = guess_net(first, second)
    if form == "lsq":
        d_loss = ((s_d - t) ** 2).mean()
        g_loss = ((s_g - (1.0 - t)) ** 2).mean()
    else:
        d_loss = torch.nn.functional.binary_cross_entropy_with_logits(
            s_d, torch.full_like(s_d, t))
        g_loss = torch.nn.functional.binary_cross_entropy_with_logits(
            s_g, torch.full_like(s_g, 1.0 - t))
    return d_loss, g_loss


@dataclass
class GeneratorObjective:
    """Assembled generator loss plus the tensors the trainer reuses."""

    total: torch.Tensor
    breakdown: LossBreakdown
    fake_a: torch.Tensor
    fake_b: torch.Tensor
    guess_d_loss_a: torch.Tensor | None = None
    guess_d_loss_b: torch.Tensor | None = None


def assemble_generator_objective(
        x_a: torch.Tensor, y_b: torch.Tensor, *, g_ab, g_ba, d_a, d_b, cfg,
        guess_a=None, guess_b=None,
        noise_gen_a: torch.Generator | None = None,
        noise_gen_b: torch.Generator | None = None,
        coin_a: int = 0, coin_b: int = 0) -> GeneratorObjective:
    """Full generator objective on one unpaired batch (model-range tensors).

    cfg supplies: defense, lambda_a, lambda_b, lambda_guess, sigma, identity,
    noise_cycle_a, noise_cycle_b, guess_loss_form. Domain-A terms concern
    images in domain A (reconstructions of x_a, outputs of g_ba).
    """
    if cfg.defense not in DEFENSE_MODES:
        raise ValueError(f"unknown defense mode {cfg.defense!r}")
    for name in ("lambda_a", "lambda_b", "lambda_guess"):
        if getattr(cfg, name) < 0:
            raise ValueError(f"{name} must be >= 0, got {getattr(cfg, name)}")
    use_noise = cfg.defense in ("noise", "noise+guess")
    use_guess = cfg.defense in ("guess", "noise+guess")
    sigma_model = MODEL_RANGE_SCALE * cfg.sigma if use_noise else 0.0

    fake_b = g_ab(x_a)
    fake_a = g_ba(y_b)
    adv_g_b = ((d_b(fake_b) - 1.0) ** 2).mean()
    adv_g_a = ((d_a(fake_a) - 1.0) ** 2).mean()

    t_b = fake_b
    if sigma_model > 0.0 and getattr(cfg, "noise_cycle_a", True):
        t_b = perturb(fake_b, sigma_model, noise_gen_a, -1.0, 1.0)
    rec_a = g_ba(t_b)
    cyc_a_raw = cycle_loss(x_a, rec_a)

    t_a = fake_a
    if sigma_model > 0.0 and getattr(cfg, "noise_cycle_b", True):
        t_a = perturb(fake_a, sigma_model, noise_gen_b, -1.0, 1.0)
    rec_b = g_ab(t_a)
    cyc_b_raw = cycle_loss(y_b, rec_b)

    total = adv_g_a + adv_g_b + cfg.lambda_a * cyc_a_raw + cfg.lambda_b * cyc_b_raw
    br = LossBreakdown(
        adv_g_a=adv_g_a.item(), adv_g_b=adv_g_b.item(),
        cyc_a=cfg.lambda_a * cyc_a_raw.item(), cyc_b=cfg.lambda_b * cyc_b_raw.item(),
        cyc_a_raw=cyc_a_raw.item(), cyc_b_raw=cyc_b_raw.item(),
    )

    guess_d_a = guess_d_b = None
    if use_guess:
        form = getattr(cfg, "guess_loss_form", "lsq")
        guess_d_a, g_guess_a = guess_loss(x_a, rec_a, guess_a, coin_a, form)
        guess_d_b, g_guess_b = guess_loss(y_b, rec_b, guess_b, coin_b, form)
        total = total + cfg.lambda_guess * (g_guess_a + g_guess_b)
        br.guess_a_raw = g_guess_a.item()
        br.guess_b_raw = g_guess_b.item()
        br.guess_a = cfg.lambda_guess * br.guess_a_raw
        br.guess_b = cfg.lambda_guess * br.guess_b_raw

    if getattr(cfg, "identity", False):
        idt_a = cycle_loss(x_a, g_ba(x_a))
        idt_b = cycle_loss(y_b, g_ab(y_b))
        total = total + 0.5 * cfg.lambda_a * idt_a + 0.5 * cfg.lambda_b * idt_b
        br.idt_a = 0.5 * cfg.lambda_a * idt_a.item()
        br.idt_b = 0.5 * cfg.lambda_b * idt_b.item()

    br.total = (br.adv_g_a + br.adv_g_b + br.cyc_a + br.cyc_b
                + br.guess_a + br.guess_b + br.idt_a + br.idt_b)
    return GeneratorObjective(total=total, breakdown=br,
                              fake_a=fake_a.detach(), fake_b=fake_b.detach(),
                              guess_d_loss_a=guess_d_a, guess_d_loss_b=guess_d_b)
