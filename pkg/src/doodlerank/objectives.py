"""Loss functions: triplet ranking, domain-adversarial, semantic
reconstruction, and their weighted combination.

Sign convention: the domain term is the standard negated binary
cross-entropy (targets 0 for sketches, 1 for photos), minimised by the
classifier while the gradient reversal layer makes the encoders
adversarial to it. Logits are clamped at +/-15 before the sigmoid;
probabilities are never clamped. Cosine denominators carry a 1e-8
stabiliser.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from . import autodiff as ad
from . import encoder as enc
from .autodiff import Tensor

if TYPE_CHECKING:
    from .data import TripletBatch

LOGIT_CLAMP = 15.0
COSINE_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    alpha_triplet: float = 1.0
    alpha_domain: float = 1.0
    alpha_semantic: float = 1.0
    margin: float = 1.0
    lambda_semantic: float = 0.5
    normalize_embeddings: bool = False

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError(f"margin must be > 0, got {self.margin}")
        for name in ("alpha_triplet", "alpha_domain", "alpha_semantic"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def _check_triplet_shapes(emb_a: Tensor, emb_p: Tensor, emb_n: Tensor) -> None:
    if not (emb_a.shape == emb_p.shape == emb_n.shape) or emb_a.data.ndim != 2:
        raise ad.ShapeError(
            f"triplet embeddings must share an (N, D) shape, got {emb_a.shape}, {emb_p.shape}, {emb_n.shape}"
        )


def _row_normalize(e: Tensor) -> Tensor:
    inv = ad.div(1.0, ad.add(ad.l2_norm(e, axis=1), COSINE_EPS))
    ones_row = ad.Tensor(np.ones((1, e.shape[1])), dtype=e.dtype)
    scale = ad.matmul(ad.reshape(inv, (e.shape[0], 1)), ones_row)
    return ad.mul(e, scale)


def triplet_loss(emb_a: Tensor, emb_p: Tensor, emb_n: Tensor, margin: float = 1.0,
                 normalize: bool = False) -> Tensor:
    """Mean hinge on the L2 distance gap: max{0, margin + d_pos - d_neg}.

    Zero exactly when every negative sits at least ``margin`` farther from
    the anchor than the positive does.
    """
    _check_triplet_shapes(emb_a, emb_p, emb_n)
    if normalize:
        emb_a, emb_p, emb_n = (_row_normalize(e) for e in (emb_a, emb_p, emb_n))
    d_pos = ad.l2_norm(ad.sub(emb_a, emb_p), axis=1)
    d_neg = ad.l2_norm(ad.sub(emb_a, emb_n), axis=1)
    hinge = ad.max_with_zero(ad.add(ad.sub(d_pos, d_neg), margin))
    return ad.mean(hinge)


def binary_cross_entropy_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negated BCE; logits clamped to +/-LOGIT_CLAMP for stability."""
    z = ad.clamp(logits, -LOGIT_CLAMP, LOGIT_CLAMP)
    p = ad.sigmoid(z)
    t = ad.Tensor(np.asarray(targets), dtype=z.dtype)
    if t.shape != z.shape:
        raise ad.ShapeError(f"targets shape {t.shape} != logits shape {z.shape}")
    ll = ad.add(ad.mul(t, ad.log(p)), ad.mul(ad.sub(1.0, t), ad.log(ad.sub(1.0, p))))
    return ad.neg(ad.mean(ll))


def domain_loss(params: enc.ModelParams, emb_a: Tensor, emb_p: Tensor, emb_n: Tensor,
                lambda_d: float) -> Tensor:
    """Sketch-vs-photo BCE over all 3N embeddings, routed through the GRL.

    Targets: 0 for the sketch anchors, 1 for both photo embeddings.
    """
    _check_triplet_shapes(emb_a, emb_p, emb_n)
    n = emb_a.shape[0]
    stacked = ad.concat([emb_a, emb_p, emb_n], axis=0)
    logits = enc.domain_logits(params, stacked, lambda_d)
    targets = np.concatenate([np.zeros(n), np.ones(2 * n)])
    return binary_cross_entropy_with_logits(logits, targets)


def cosine_distance_terms(decoded: Tensor, targets: Tensor) -> Tensor:
    """Per-row (1 - cos)/2 between decoded vectors and targets, in [0, 1]."""
    if decoded.shape != targets.shape or decoded.data.ndim != 2:
        raise ad.ShapeError(f"decoded shape {decoded.shape} != targets shape {targets.shape}")
    dot = ad.sum(ad.mul(decoded, targets), axis=1)
    denom = ad.add(ad.mul(ad.l2_norm(decoded, axis=1), ad.l2_norm(targets, axis=1)), COSINE_EPS)
    cos = ad.div(dot, denom)
    return ad.mul(ad.sub(1.0, cos), 0.5)


def semantic_loss(params: enc.ModelParams, emb_a: Tensor, emb_p: Tensor, emb_n: Tensor,
                  targets, lambda_s: float) -> Tensor:
    """Cosine reconstruction of the anchor-class word vector from all three
    embeddings; the negative passes through a GRL before the decoder so its
    encoder gradient pushes similar-class semantics apart."""
    _check_triplet_shapes(emb_a, emb_p, emb_n)
    t = ad.as_tensor(targets)
    if t.data.ndim != 2 or t.shape[0] != emb_a.shape[0]:
        raise ad.ShapeError(f"semantic targets shape {t.shape} does not match batch {emb_a.shape}")
    if t.dtype != emb_a.dtype:
        t = ad.Tensor(t.data, dtype=emb_a.dtype)
    stacked = ad.concat([emb_a, emb_p, ad.grl(emb_n, lambda_s)], axis=0)
    decoded = enc.semantic_decode(params, stacked)
    tiled = ad.concat([t, t, t], axis=0)
    return ad.mean(cosine_distance_terms(decoded, tiled))


def total_loss(params: enc.ModelParams, enc_cfg: enc.EncoderConfig, batch: "TripletBatch",
               weights: LossWeights, lambda_d: float) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of the three objectives over one triplet batch.

    Sub-losses with a zero weight are skipped entirely (their heads see no
    gradient), which makes the ablation rows exact rather than approximate.
    Returns the scalar loss tensor and a float breakdown for logging.
    """
    emb_a = enc.embed_sketch(params, enc_cfg, batch.anchors)
    emb_p = enc.embed_photo(params, enc_cfg, batch.positives)
    emb_n = enc.embed_photo(params, enc_cfg, batch.negatives)

    parts: dict[str, float] = {"triplet": 0.0, "domain": 0.0, "semantic": 0.0}
    total: Tensor | None = None

    def accumulate(term: Tensor, weight: float) -> None:
        nonlocal total
        weighted = ad.mul(term, weight) if weight != 1.0 else term
        total = weighted if total is None else ad.add(total, weighted)

    if weights.alpha_triplet > 0:
        lt = triplet_loss(emb_a, emb_p, emb_n, weights.margin, weights.normalize_embeddings)
        parts["triplet"] = lt.item()
        accumulate(lt, weights.alpha_triplet)
    if weights.alpha_domain > 0:
        ld = domain_loss(params, emb_a, emb_p, emb_n, lambda_d)
        parts["domain"] = ld.item()
        accumulate(ld, weights.alpha_domain)
    if weights.alpha_semantic > 0:
        ls = semantic_loss(params, emb_a, emb_p, emb_n, batch.semantics, weights.lambda_semantic)
        parts["semantic"] = ls.item()
        accumulate(ls, weights.alpha_semantic)

    if total is None:
        total = ad.Tensor(np.zeros((), dtype=emb_a.dtype))
    parts["total"] = total.item()
    return total, parts
