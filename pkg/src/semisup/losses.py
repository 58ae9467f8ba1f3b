"""Loss terms and their weighted composition.

The composite objective is
    total = w_sup*sup + w_rot*rot + w_exemplar*exemplar + w_vat*vat + w_entmin*entmin
where the self-supervised terms (rot, exemplar) consume the union of the
labeled and unlabeled minibatches when configured, and the supervised
cross-entropy can additionally cover the augmented copies of labeled images
produced by the self-supervised transformations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import exemplar_instances, rotate90

TERM_NAMES = ("sup", "rot", "exemplar", "vat", "entmin")


@dataclass
class LossSpec:
    w_sup: float = 1.0
    w_rot: float = 0.0
    w_exemplar: float = 0.0
    w_vat: float = 0.0
    w_entmin: float = 0.0
    vat_eps: float | None = None       # pixel-space radius; None -> heuristic
    vat_xi: float = 1e-6               # power-iteration probe scale
    vat_power_iters: int = 1
    exemplar_count: int = 8
    triplet_margin: str = "soft"
    apply_self_sup_to_labeled: bool = True
    apply_sup_to_augmented: bool = True

    def validate(self):
        for name in ("w_sup", "w_rot", "w_exemplar", "w_vat", "w_entmin"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.w_vat > 0 and self.vat_eps is not None and self.vat_eps <= 0:
            raise ValueError("vat_eps must be positive when the VAT term is enabled")
        if self.vat_power_iters < 1:
            raise ValueError("vat_power_iters must be >= 1")
        if self.triplet_margin != "soft":
            raise ValueError("only the soft (softplus) triplet margin is supported")
        if self.exemplar_count < 2:
            raise ValueError("exemplar_count must be >= 2")
        return self

    def weights(self) -> dict:
        return {name: float(getattr(self, "w_" + name)) for name in TERM_NAMES}


# ------------------------------------------------------------- plain terms

def _one_hot(labels, k, dtype):
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], k), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out


def supervised_ce(class_logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log p(label)."""
    labels = np.asarray(labels)
    n, k = class_logits.shape
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError("label out of range")
    logp = ad.log_softmax(class_logits)
    picked = ad.tsum(ad.mul(logp, _one_hot(labels, k, logp.dtype)), axes=1)
    return ad.neg(ad.tmean(picked))


def rotation_loss(rot_logits: Tensor, rot_labels) -> Tensor:
    """Mean cross-entropy over all rotated copies (labels in 0..3)."""
    rot_labels = np.asarray(rot_labels)
    if rot_logits.shape[1] != 4:
        raise ValueError("rotation head must emit 4 logits")
    if rot_labels.min() < 0 or rot_labels.max() > 3:
        raise ValueError("rotation label outside 0..3")
    return supervised_ce(rot_logits, rot_labels)


def entmin_loss(class_logits: Tensor) -> Tensor:
    """Mean predictive entropy: -sum_y p(y|x) log p(y|x)."""
    logp = ad.log_softmax(class_logits)
    p = ad.exp(logp)
    return ad.neg(ad.tmean(ad.tsum(ad.mul(p, logp), axes=1)))


def exemplar_loss(embeddings: Tensor, group_ids) -> Tensor:
    """Batch-hard triplet with a soft margin.

    Per anchor: hardest positive = max Euclidean distance within the
    anchor's group, hardest negative = min distance to any other group;
    loss = mean softplus(d_pos - d_neg).
    """
    gids = np.asarray(group_ids)
    m = embeddings.shape[0]
    if gids.shape != (m,):
        raise ValueError("one group id per embedding row required")
    values, counts = np.unique(gids, return_counts=True)
    if len(values) < 2:
        raise ValueError("need at least two distinct groups")
    if counts.min() < 2:
        raise ValueError("every group needs at least two members")

    same = (gids[:, None] == gids[None, :]).astype(embeddings.dtype)
    sq = ad.tsum(ad.mul(embeddings, embeddings), axes=1, keepdims=True)  # m,1
    gram = ad.matmul(embeddings, ad.transpose(embeddings))
    d2 = ad.add(ad.add(sq, ad.transpose(sq)), ad.scale(gram, -2.0))
    # the epsilon keeps sqrt differentiable on the zero diagonal
    dist = ad.sqrt(ad.add(ad.relu(d2), 1e-12))
    d_pos = ad.tmax(ad.mul(dist, same), axes=1)
    d_neg = ad.neg(ad.tmax(ad.add(ad.neg(dist), ad.mul(same, -1e9)), axes=1))
    return ad.tmean(ad.softplus(ad.sub(d_pos, d_neg)))


# ---------------------------------------------------------------------- VAT

def _softmax_np(logits: np.ndarray):
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return np.exp(logp), logp


def _kl_to_constant(p_const: np.ndarray, p_logp_mean: float, pert_logits: Tensor) -> Tensor:
    """mean_rows KL(p_const || softmax(pert_logits)); gradient flows only
    through the perturbed logits."""
    logq = ad.log_softmax(pert_logits)
    cross = ad.tmean(ad.tsum(ad.mul(logq, p_const), axes=1))
    # relu clamps float noise; at the KL minimum the true gradient is zero
    return ad.relu(ad.sub(float(p_logp_mean), cross))


def _flat_norms(arr: np.ndarray) -> np.ndarray:
    flat = arr.reshape(arr.shape[0], -1)
    return np.sqrt((flat * flat).sum(axis=1))


def _normalize_rows(arr: np.ndarray) -> np.ndarray:
    norms = _flat_norms(arr)
    shape = (-1,) + (1,) * (arr.ndim - 1)
    return arr / np.maximum(norms, 1e-300).reshape(shape)


def vat_direction(model, x: np.ndarray, eps: float, xi: float = 1e-6,
                  power_iters: int = 1, rng=None, seed=None, clean=None):
    """Power-iteration estimate of the most KL-sensitive perturbation.

    Returns (delta, flagged) where delta has Euclidean norm eps per example
    and flagged counts examples whose KL gradient vanished (those keep
    their random probe direction).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if rng is None:
        rng = np.random.default_rng(seed)
    twin = model.clone_detached()
    if clean is None:
        p, logp = _softmax_np(twin.forward(x).class_logits.data)
    else:
        p, logp = clean
    p_logp_mean = float((p * logp).sum(axis=1).mean())

    d = _normalize_rows(rng.standard_normal(x.shape).astype(x.dtype))
    flagged = 0
    for _ in range(power_iters):
        g = ad.Graph()
        dt = g.watch(Tensor(d.copy()))
        pert = ad.add(Tensor(x), ad.scale(dt, xi))
        logits = twin.forward(pert).class_logits
        kl = _kl_to_constant(p, p_logp_mean, logits)
        grad = g.backward(kl).get(dt)
        if grad is None:
            flagged += x.shape[0]
            break
        norms = _flat_norms(grad)
        dead = norms <= 0
        flagged += int(dead.sum())
        new_d = _normalize_rows(grad)
        if dead.any():
            new_d[dead] = d[dead]
        d = new_d
    return eps * d, flagged


def vat_loss(model, x: np.ndarray, delta: np.ndarray, clean=None) -> Tensor:
    """Mean KL between the clean predictive distribution (a constant) and
    the distribution at x + delta; gradient flows through the perturbed
    branch only."""
    if clean is None:
        p, logp = _softmax_np(model.clone_detached().forward(x).class_logits.data)
    else:
        p, logp = clean
    pert_logits = model.forward(Tensor(np.asarray(x + delta, dtype=x.dtype))).class_logits
    return _kl_to_constant(p, float((p * logp).sum(axis=1).mean()), pert_logits)


def propose_vat_eps_grid(images: np.ndarray, sample: int = 256, seed: int = 0):
    """Four log-spaced radii from the half-nearest-neighbour-distance rule.

    base = median over a sample of (distance to nearest neighbour) / 2;
    grid = base * 2^{-k/3}, k = 0..3.
    """
    n = images.shape[0]
    rng = np.random.default_rng(seed)
    take = min(n, sample)
    idx = rng.choice(n, size=take, replace=False)
    flat = images[idx].reshape(take, -1).astype(np.float64)
    sq = (flat * flat).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (flat @ flat.T)
    np.fill_diagonal(d2, np.inf)
    nn = np.sqrt(np.maximum(d2.min(axis=1), 0.0))
    base = float(np.median(nn)) / 2.0
    return [base * 2.0 ** (-k / 3.0) for k in range(4)]


# ---------------------------------------------------------------- composite

@dataclass
class CompositeResult:
    total: Tensor
    terms: dict = field(default_factory=dict)


def composite(spec: LossSpec, model, labeled_x, labeled_y, unlabeled_x,
              graph: ad.Graph | None = None, rng=None) -> CompositeResult:
    """Assemble the weighted objective on a single graph.

    Per-term raw (unweighted) values are reported for every name in
    TERM_NAMES plus 'total' (the weighted sum that is differentiated).
    """
    spec.validate()
    if rng is None:
        rng = np.random.default_rng(0)
    g = graph if graph is not None else ad.Graph()

    need_unlabeled = (spec.w_vat > 0 or spec.w_entmin > 0
                      or ((spec.w_rot > 0 or spec.w_exemplar > 0)
                          and not spec.apply_self_sup_to_labeled))
    if need_unlabeled and unlabeled_x is None:
        raise ValueError("this loss configuration requires an unlabeled batch")
    if spec.w_sup > 0 and labeled_x is None:
        raise ValueError("the supervised term requires a labeled batch")

    for t in model.params.values():
        g.watch(t)

    n_l = 0 if labeled_x is None else labeled_x.shape[0]
    if spec.apply_self_sup_to_labeled and labeled_x is not None:
        if unlabeled_x is not None:
            union = np.concatenate([labeled_x, unlabeled_x], axis=0)
        else:
            union = labeled_x
        union_labeled = n_l
    else:
        union = unlabeled_x
        union_labeled = 0
    if (spec.w_rot > 0 or spec.w_exemplar > 0) and union is None:
        raise ValueError("self-supervised terms have no images to consume")

    terms: dict[str, float] = {}
    pieces: list[tuple[float, Tensor]] = []
    sup_sources: list[tuple[Tensor, np.ndarray]] = []  # (logits rows, labels)
    unlabeled_clean_logits: Tensor | None = None

    if spec.w_rot > 0:
        rot_x, rot_labels = rotate90(union)
        out = model.forward(rot_x)
        if out.rot_logits is None:
            raise ValueError("model has no rotation head")
        rot = rotation_loss(out.rot_logits, rot_labels)
        terms["rot"] = rot.item()
        pieces.append((spec.w_rot, rot))
        u = union.shape[0]
        if union_labeled and spec.apply_sup_to_augmented and spec.w_sup > 0:
            rows = np.concatenate([r * u + np.arange(n_l) for r in range(4)])
            sup_sources.append((ad.gather_rows(out.class_logits, rows),
                                np.tile(labeled_y, 4)))
        if unlabeled_x is not None and spec.w_entmin > 0:
            # the 0-degree block re-embeds the raw unlabeled images
            rows = union_labeled + np.arange(u - union_labeled)
            unlabeled_clean_logits = ad.gather_rows(out.class_logits, rows)

    if spec.w_exemplar > 0:
        inst, gids = exemplar_instances(union, count=spec.exemplar_count, rng=rng)
        out = model.forward(inst)
        ex = exemplar_loss(out.embedding, gids)
        terms["exemplar"] = ex.item()
        pieces.append((spec.w_exemplar, ex))
        if union_labeled and spec.apply_sup_to_augmented and spec.w_sup > 0:
            rows = np.arange(n_l * spec.exemplar_count)
            sup_sources.append((ad.gather_rows(out.class_logits, rows),
                                np.repeat(labeled_y, spec.exemplar_count)))

    if spec.w_sup > 0 and not sup_sources:
        sup_sources.append((model.forward(labeled_x).class_logits, np.asarray(labeled_y)))

    if spec.w_sup > 0:
        total_rows = sum(lab.shape[0] for _, lab in sup_sources)
        sup = None
        for logits, lab in sup_sources:
            part = ad.scale(supervised_ce(logits, lab), lab.shape[0] / total_rows)
            sup = part if sup is None else ad.add(sup, part)
        terms["sup"] = sup.item()
        pieces.append((spec.w_sup, sup))

    if spec.w_entmin > 0:
        if unlabeled_clean_logits is None:
            unlabeled_clean_logits = model.forward(unlabeled_x).class_logits
        ent = entmin_loss(unlabeled_clean_logits)
        terms["entmin"] = ent.item()
        pieces.append((spec.w_entmin, ent))

    if spec.w_vat > 0:
        if spec.vat_eps is None:
            raise ValueError("vat_eps unset; call propose_vat_eps_grid or set it explicitly")
        if unlabeled_clean_logits is not None:
            clean = _softmax_np(unlabeled_clean_logits.data)
        else:
            clean = _softmax_np(model.clone_detached().forward(unlabeled_x).class_logits.data)
        delta, flagged = vat_direction(model, unlabeled_x, eps=spec.vat_eps,
                                       xi=spec.vat_xi, power_iters=spec.vat_power_iters,
                                       rng=rng, clean=clean)
        vat = vat_loss(model, unlabeled_x, delta, clean=clean)
        terms["vat"] = vat.item()
        terms["vat_flagged"] = float(flagged)
        pieces.append((spec.w_vat, vat))

    total = None
    for w, piece in pieces:
        part = ad.scale(piece, w)
        total = part if total is None else ad.add(total, part)
    if total is None:
        total = Tensor(np.asarray(0.0))
    for name in TERM_NAMES:
        terms.setdefault(name, 0.0)
    terms["total"] = total.item()
    return CompositeResult(total=total, terms=terms)
