"""Loss terms of the disentanglement objective as pure functions of images,
codes, and discriminator outputs, plus the weighted total.

Conventions: every L1-family loss uses mean reduction so the trade-off
weights are resolution-independent; generator-side adversarial terms use the
non-saturating -log D(fake) form; the encoder-side place-adversarial target
is the uniform 0.5 label.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Mapping, Optional, Union

import torch

from .errors import NumericError, ShapeError, ValidationError
from .geometry import GeometricTransform, apply_transform, inverse_transform

Scalar = Union[float, torch.Tensor]

TERM_NAMES = (
    "cc", "gc", "cgc", "recon",
    "adv_app", "adv_occ", "adv_place",
    "lat_app", "lat_place", "kl", "cls",
)


@dataclass(frozen=True)
class LossWeights:
    """Nonnegative trade-off weights, one per objective term."""

    cc: float = 10.0
    gc: float = 10.0
    cgc: float = 10.0
    recon: float = 10.0
    adv_app: float = 1.0
    adv_occ: float = 1.0
    adv_place: float = 1.0
    lat_app: float = 10.0
    lat_place: float = 10.0
    kl: float = 0.01
    cls: float = 1.0

    def __post_init__(self):
        for name in TERM_NAMES:
            v = getattr(self, name)
            if not (v >= 0.0 and v == v and v != float("inf")):
                raise ValidationError(f"weight '{name}' must be finite and >= 0, got {v}")

    def as_dict(self) -> dict[str, float]:
        return {n: float(getattr(self, n)) for n in TERM_NAMES}


@dataclass
class LossReport:
    """One scalar per objective term plus their weighted total."""

    cc: float
    gc: float
    cgc: float
    recon: float
    adv_app: float
    adv_occ: float
    adv_place: float
    lat_app: float
    lat_place: float
    kl: float
    cls: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return dataclasses.asdict(self)

    def to_json_line(self, step: int) -> str:
        record = {"step": step}
        record.update({k: float(v) for k, v in self.as_dict().items()})
        return json.dumps(record)

    @staticmethod
    def from_json_line(line: str) -> tuple[int, "LossReport"]:
        record = json.loads(line)
        step = int(record.pop("step"))
        return step, LossReport(**{k: record[k] for k in TERM_NAMES + ("total",)})


def _require_same_shape(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {tuple(a.shape)} vs {tuple(b.shape)} differ")


def _mean_l1(a: torch.Tensor, b: torch.Tensor, what: str) -> torch.Tensor:
    _require_same_shape(a, b, what)
    return (a - b).abs().mean()


def cross_cycle_loss(x, y, x_hat, y_hat) -> torch.Tensor:
    """L1 gap between originals and their double-swap reconstructions."""
    x, y, x_hat, y_hat = (_pixels(t) for t in (x, y, x_hat, y_hat))
    return _mean_l1(x_hat, x, "cross-cycle x") + _mean_l1(y_hat, y, "cross-cycle y")


def self_reconstruction_loss(x, x_tilde, y, y_tilde) -> torch.Tensor:
    """L1 gap between each image and its own-codes reconstruction."""
    x, x_tilde, y, y_tilde = (_pixels(t) for t in (x, x_tilde, y, y_tilde))
    return _mean_l1(x_tilde, x, "self-recon x") + _mean_l1(y_tilde, y, "self-recon y")


def image_adversarial_loss(real_scores: Optional[torch.Tensor],
                           fake_scores: torch.Tensor, side: str) -> torch.Tensor:
    """Realness game over patch scores in (0, 1).

    Discriminator side: -(E log D(real) + E log(1 - D(fake))).
    Generator side: the non-saturating -E log D(fake); ignores real_scores.
    """
    _check_scores(fake_scores, "fake_scores")
    if side == "generator":
        return -torch.log(fake_scores).mean()
    if side == "discriminator":
        if real_scores is None:
            raise ValidationError("discriminator side requires real scores")
        _check_scores(real_scores, "real_scores")
        return -(torch.log(real_scores).mean() + torch.log(1.0 - fake_scores).mean())
    raise ValidationError(f"side must be 'generator' or 'discriminator', got {side!r}")


def _check_scores(s: torch.Tensor, what: str):
    if not torch.isfinite(s).all():
        raise ValidationError(f"{what} contain non-finite values")
    if s.numel() == 0:
        raise ValidationError(f"{what} is empty")
    if s.min().item() <= 0.0 or s.max().item() >= 1.0:
        raise ValidationError(f"{what} must lie strictly inside (0, 1)")


def place_adversarial_loss(logits_x: torch.Tensor, logits_y: torch.Tensor,
                           side: str) -> torch.Tensor:
    """Feature-level game on per-item place-code logits.

    Discriminator side: binary cross-entropy with side-1 items labeled 1 and
    side-2 items labeled 0 (one expectation per side, summed). Encoder side:
    uniform 0.5 targets averaged over all items, pushing the codes toward
    indistinguishability.
    """
    for name, l in (("logits_x", logits_x), ("logits_y", logits_y)):
        if not torch.isfinite(l).all():
            raise ValidationError(f"{name} contain non-finite values")
    softplus = torch.nn.functional.softplus
    if side == "discriminator":
        # -log sigmoid(l) = softplus(-l); -log(1 - sigmoid(l)) = softplus(l)
        return softplus(-logits_x).mean() + softplus(logits_y).mean()
    if side == "encoder":
        both = torch.cat([logits_x.reshape(-1), logits_y.reshape(-1)])
        return (0.5 * softplus(-both) + 0.5 * softplus(both)).mean()
    raise ValidationError(f"side must be 'encoder' or 'discriminator', got {side!r}")


def geometry_consistency_loss(x_bar, x_bar_prime, t: GeometricTransform) -> torch.Tensor:
    """Two-sided L1 commutativity gap between translating-then-transforming
    and transforming-then-translating."""
    a = _pixels(x_bar)
    b = _pixels(x_bar_prime)
    _require_same_shape(a, b, "geometry consistency")
    if a.shape[-1] != a.shape[-2]:
        raise ShapeError("geometry consistency requires square images")
    f_inv_b = apply_transform(b, inverse_transform(t))
    f_a = apply_transform(a, t)
    return (a - f_inv_b).abs().mean() + (b - f_a).abs().mean()


def cross_cycle_geometry_loss(y_hat_prime, y_prime) -> torch.Tensor:
    """L1 gap between the transformed-path reconstruction and the
    transformed original."""
    return _mean_l1(_pixels(y_hat_prime), _pixels(y_prime), "cross-cycle geometry")


def kl_loss(appearance_mean: torch.Tensor, appearance_logvar: torch.Tensor) -> torch.Tensor:
    """Closed-form KL from the diagonal-Gaussian appearance posterior to the
    standard normal prior, averaged over the batch."""
    for name, v in (("mean", appearance_mean), ("logvar", appearance_logvar)):
        if not torch.isfinite(v).all():
            raise ValidationError(f"appearance {name} contains non-finite values")
    _require_same_shape(appearance_mean, appearance_logvar, "kl")
    per_item = 0.5 * (
        appearance_mean.pow(2) + appearance_logvar.exp() - 1.0 - appearance_logvar
    ).sum(dim=-1)
    return per_item.mean()


def appearance_latent_regression_loss(z_drawn: torch.Tensor,
                                      z_recovered: torch.Tensor) -> torch.Tensor:
    """L1 gap between a prior-drawn appearance code and its recovery from
    the image generated with it."""
    return _mean_l1(z_recovered, z_drawn, "appearance latent regression")


def place_latent_regression_loss(z_p_original: torch.Tensor,
                                 z_p_of_translated: torch.Tensor) -> torch.Tensor:
    """L1 gap between a place code and the place code of its translation."""
    return _mean_l1(z_p_of_translated, z_p_original, "place latent regression")


def domain_classification_loss(domain_logits: torch.Tensor, domain: torch.Tensor,
                               side: str = "discriminator_on_real") -> torch.Tensor:
    """Softmax cross-entropy of the auxiliary domain head.

    The discriminator side scores real images against their true domains;
    the generator side scores translated images against their target
    domains. The arithmetic is identical; `side` documents the call.
    """
    if side not in ("discriminator_on_real", "generator_on_fake"):
        raise ValidationError(f"invalid side {side!r}")
    if domain_logits.dim() != 2:
        raise ShapeError("domain logits must be B x k")
    k = domain_logits.shape[1]
    if domain.shape != (domain_logits.shape[0],):
        raise ShapeError("labels must be a vector matching the batch")
    if domain.numel() and (domain.min().item() < 0 or domain.max().item() >= k):
        raise ValidationError(f"domain label out of range [0, {k})")
    log_probs = torch.log_softmax(domain_logits, dim=1)
    return -log_probs.gather(1, domain.long().unsqueeze(1)).mean()


def total_loss(terms: Mapping[str, Scalar], weights: LossWeights,
               multidomain: bool) -> torch.Tensor:
    """Weighted sum of the objective terms; the auxiliary domain
    classification term participates only in multi-domain training.

    Raises NumericError naming the first non-finite term.
    """
    names = TERM_NAMES if multidomain else TERM_NAMES[:-1]
    missing = [n for n in names if n not in terms]
    if missing:
        raise ValidationError(f"missing loss terms: {missing}")
    total: Scalar = 0.0
    for name in names:
        value = terms[name]
        value_f = float(value.detach() if isinstance(value, torch.Tensor) else value)
        if value_f != value_f or value_f in (float("inf"), float("-inf")):
            raise NumericError(name)
        total = total + getattr(weights, name) * value
    if not isinstance(total, torch.Tensor):
        total = torch.as_tensor(total, dtype=torch.float64)
    return total


def make_report(terms: Mapping[str, Scalar], weights: LossWeights,
                multidomain: bool) -> LossReport:
    """Freeze the term values and their weighted total into a report.

    Without the multi-domain extension the classification term is excluded
    from the total, so it is reported as zero to keep the report's
    total == weighted-sum invariant intact.
    """
    total = float(total_loss(terms, weights, multidomain).detach())
    values = {}
    for name in TERM_NAMES:
        v = terms.get(name, 0.0)
        values[name] = float(v.detach() if isinstance(v, torch.Tensor) else v)
    if not multidomain:
        values["cls"] = 0.0
    return LossReport(total=total, **values)


def _pixels(img) -> torch.Tensor:
    return img.pixels if hasattr(img, "pixels") else img
