"""Alignment and fusion detection heads with their losses.

The alignment head classifies by prompt similarity: per cell embedding
z_i and class c, the logit is the maximum over that class's prompts of
alpha * <z_i, p_j / ||p_j||> + beta, after both sides pass a shared MLP.
Its loss adds a supervised contrastive term (prompt-anchored), a focal
classification term, and a smooth-L1 box term.

The fusion head first runs prompts and cell features through three
cross-attention fusion layers (prompts attend to cells, then cells to
the updated prompts, with residual + layer norm around every sub-block)
and adds per-image randomized class embeddings to the prompts; its loss
is assembled the same way from the fused tensors.

Everything differentiable is expressed through ``numkit`` tensors so one
backward pass trains both heads at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .geom import Detection, OrientedBox, class_agnostic_nms, contains_point, normalize_angle
from .promptdict import PromptBatch

EMBED_DIM = 256
DEFAULT_HEADS = 8
DEFAULT_CLASS_SLOTS = 80
FUSION_LAYERS = 3
FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25
BACKGROUND = -1


# ------------------------------------------------------------------- containers


@dataclass
class FeatureGrid:
    """One-scale dense feature map: a row of features per spatial cell."""

    cells: nk.Tensor2D                  # N x EMBED_DIM
    centers: np.ndarray                 # N x 2 (x, y) pixel coordinates
    stride: float
    grid_h: int
    grid_w: int

    def __post_init__(self) -> None:
        n = self.grid_h * self.grid_w
        if self.cells.rows != n:
            raise ValueError(
                f"cell count {self.cells.rows} != grid {self.grid_h}x{self.grid_w}"
            )
        self.centers = np.asarray(self.centers, dtype=np.float64)
        if self.centers.shape != (n, 2):
            raise ValueError(f"centers must be {n}x2, got {self.centers.shape}")
        if self.stride <= 0:
            raise ValueError(f"stride must be positive, got {self.stride}")
        w_px = self.grid_w * self.stride
        h_px = self.grid_h * self.stride
        if (
            self.centers[:, 0].min() < 0 or self.centers[:, 0].max() > w_px
            or self.centers[:, 1].min() < 0 or self.centers[:, 1].max() > h_px
        ):
            raise ValueError("cell centers fall outside the image bounds")


@dataclass
class HeadOutput:
    """Per-cell embeddings and box regressions from one head."""

    Z: nk.Tensor2D                      # N x EMBED_DIM
    hbb_deltas: nk.Tensor2D             # N x 4: dcx, dcy, log w, log h (stride units)
    obb_deltas: nk.Tensor2D             # N x 5: dcx, dcy, log w, log h, angle (rad)
    alpha: nk.Tensor2D                  # 1 x 1, > 0
    beta: nk.Tensor2D                   # 1 x 1

    def __post_init__(self) -> None:
        n = self.Z.rows
        if self.hbb_deltas.shape != (n, 4):
            raise ValueError(f"hbb_deltas must be {n}x4, got {self.hbb_deltas.shape}")
        if self.obb_deltas.shape != (n, 5):
            raise ValueError(f"obb_deltas must be {n}x5, got {self.obb_deltas.shape}")
        if self.alpha.shape != (1, 1) or self.beta.shape != (1, 1):
            raise ValueError("alpha and beta must be 1x1 scalars")
        if not self.alpha.array[0, 0] > 0.0:
            raise ValueError(f"alpha must be positive, got {self.alpha.array[0, 0]}")


class ClassEmbeddingTable:
    """K learnable vectors addressed by per-image random category ids."""

    def __init__(self, table: np.ndarray):
        arr = np.asarray(table, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != EMBED_DIM:
            raise ValueError(f"table must be K x {EMBED_DIM}, got {arr.shape}")
        if arr.shape[0] < 1:
            raise ValueError("table needs at least one slot")
        self.table = arr

    @property
    def slots(self) -> int:
        return self.table.shape[0]

    @staticmethod
    def init(rng: np.random.Generator, slots: int = DEFAULT_CLASS_SLOTS) -> "ClassEmbeddingTable":
        return ClassEmbeddingTable(rng.normal(0.0, 0.02, size=(slots, EMBED_DIM)))


@dataclass
class Assignment:
    """Cell-to-ground-truth matching (BACKGROUND = unmatched)."""

    cell_to_gt: np.ndarray              # N ints, BACKGROUND or gt index
    gt_to_cells: list[list[int]]

    def __post_init__(self) -> None:
        self.cell_to_gt = np.asarray(self.cell_to_gt, dtype=np.intp)
        for gi, cells in enumerate(self.gt_to_cells):
            for ci in cells:
                if self.cell_to_gt[ci] != gi:
                    raise ValueError("gt_to_cells disagrees with cell_to_gt")

    @property
    def n_positive(self) -> int:
        return int((self.cell_to_gt != BACKGROUND).sum())


# ------------------------------------------------------------------ assignment


def assign(gt: list[Detection], grid: FeatureGrid) -> Assignment:
    """Center sampling: each cell joins the smallest GT box containing its center.

    Ties on area break toward the earlier ground-truth index.
    """
    n = grid.centers.shape[0]
    cell_to_gt = np.full(n, BACKGROUND, dtype=np.intp)
    for i, (x, y) in enumerate(grid.centers):
        best = BACKGROUND
        best_area = math.inf
        for gi, det in enumerate(gt):
            if det.box is None:
                raise ValueError("assignment needs oriented ground-truth boxes")
            if det.box.area < best_area and contains_point(det.box, x, y):
                best = gi
                best_area = det.box.area
        cell_to_gt[i] = best
    gt_to_cells: list[list[int]] = [[] for _ in gt]
    for ci, gi in enumerate(cell_to_gt):
        if gi != BACKGROUND:
            gt_to_cells[gi].append(ci)
    return Assignment(cell_to_gt=cell_to_gt, gt_to_cells=gt_to_cells)


# ------------------------------------------------------------------- alignment


def similarity_logits(
    zm: nk.Tensor2D,
    pm: nk.Tensor2D,
    labels: list[str],
    alpha: nk.Tensor2D,
    beta: nk.Tensor2D,
    class_order: list[str] | None = None,
) -> tuple[nk.Tensor2D, list[str]]:
    """Core similarity classifier on already-mapped embeddings.

    s[i, c] = max over prompts j of class c of  alpha * <zm_i, pm_j / ||pm_j||> + beta.

    Only the prompt side is normalized, which makes the logits invariant
    under positive scaling of any prompt row and under duplicating a
    prompt within its class. Returns (N x C logits, column class names).
    """
    if pm.rows != len(labels):
        raise ValueError(f"{pm.rows} prompt rows vs {len(labels)} labels")
    if class_order is None:
        class_order = list(dict.fromkeys(labels))
    pn = nk.l2_normalize_rows(pm)
    sims = nk.add_scalar(nk.mul_scalar(nk.matmul(zm, nk.transpose(pn)), alpha), beta)
    cols = []
    for cname in class_order:
        idx = [j for j, lbl in enumerate(labels) if lbl == cname]
        if not idx:
            raise ValueError(f"no prompts carry label {cname!r}")
        cols.append(nk.rowmax(nk.gather_cols(sims, idx)))
    return nk.concat_cols(cols), list(class_order)


def class_logits(
    Z: nk.Tensor2D,
    prompts: nk.Tensor2D,
    labels: list[str],
    alpha: nk.Tensor2D,
    beta: nk.Tensor2D,
    shared: nk.MlpParams,
    normalize_z: bool = False,
    class_order: list[str] | None = None,
) -> tuple[nk.Tensor2D, list[str]]:
    """Max-over-prompt similarity logits, one column per class.

    Both cell embeddings and prompts first pass the shared MLP into a
    common space; the prompt side is then L2-normalized while the cell
    side is used as-is unless ``normalize_z`` is set.
    """
    if prompts.rows != len(labels):
        raise ValueError(f"{prompts.rows} prompt rows vs {len(labels)} labels")
    zm = nk.mlp2(Z, shared)
    pm = nk.mlp2(prompts, shared)
    if normalize_z:
        zm = nk.l2_normalize_rows(zm)
    return similarity_logits(zm, pm, labels, alpha, beta, class_order)


def class_logits_from_batch(
    Z: nk.Tensor2D,
    batch: PromptBatch,
    alpha: nk.Tensor2D,
    beta: nk.Tensor2D,
    shared: nk.MlpParams,
    normalize_z: bool = False,
) -> tuple[nk.Tensor2D, list[str]]:
    """Inference-path wrapper: prompts come in as a frozen PromptBatch."""
    prompts = nk.constant(batch.projected_matrix())
    return class_logits(
        Z,
        prompts,
        list(batch.labels),
        alpha,
        beta,
        shared,
        normalize_z=normalize_z,
        class_order=batch.class_names(),
    )


def supcon_loss(
    Z: nk.Tensor2D,
    prompts: nk.Tensor2D,
    labels: list[str],
    tau: float,
) -> nk.Tensor2D:
    """Prompt-anchored supervised contrastive loss (cosine similarities).

    For each prompt j, the anchor is the prediction row most cosine-similar
    to it. Positives are the other prompts sharing j's label; the contrast
    set is every other prompt. Anchors with no positives are skipped; the
    result averages over the remaining anchors (0 if none).
    """
    if tau <= 0.0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if prompts.rows != len(labels):
        raise ValueError(f"{prompts.rows} prompt rows vs {len(labels)} labels")
    j = prompts.rows
    if j < 2:
        return nk.constant([[0.0]])
    zn = nk.l2_normalize_rows(Z)
    pn = nk.l2_normalize_rows(prompts)
    # Anchor selection is a routing decision, not a differentiable op.
    anchor_idx = np.argmax(zn.array @ pn.array.T, axis=0)
    anchors = nk.gather_rows(zn, anchor_idx)                       # J x D
    sims = nk.scale(nk.matmul(anchors, nk.transpose(pn)), 1.0 / tau)  # J x J

    lbl = np.asarray(labels)
    same = lbl[:, None] == lbl[None, :]
    off_diag = ~np.eye(j, dtype=bool)
    pos_mask = same & off_diag
    pos_counts = pos_mask.sum(axis=1)
    valid = pos_counts > 0
    if not valid.any():
        return nk.constant([[0.0]])
    weights = np.zeros((j, j))
    weights[valid] = pos_mask[valid] / pos_counts[valid, None]

    log_probs = nk.add_colvec(sims, nk.neg(nk.row_logsumexp_masked(sims, off_diag)))
    return nk.scale(nk.sum_all(nk.mul_array(log_probs, weights)), -1.0 / int(valid.sum()))


def cls_loss(
    logits: nk.Tensor2D,
    class_names: list[str],
    assignment: Assignment,
    gt: list[Detection],
) -> nk.Tensor2D:
    """Focal loss over per-class sigmoid scores, averaged over positives.

    The assigned cell/class pairs are positives; every other pair in the
    N x C grid is a negative. Normalization is by max(1, #positives).
    """
    n, c = logits.shape
    if assignment.cell_to_gt.shape[0] != n:
        raise ValueError("assignment does not match logit rows")
    col = {name: k for k, name in enumerate(class_names)}
    pos = np.zeros((n, c))
    for ci, gi in enumerate(assignment.cell_to_gt):
        if gi == BACKGROUND:
            continue
        cat = gt[gi].category
        if cat not in col:
            raise ValueError(f"ground-truth category {cat!r} has no logit column")
        pos[ci, col[cat]] = 1.0
    neg = 1.0 - pos
    n_pos = max(1.0, pos.sum())

    # Focal terms via stable compositions:
    #   positive: alpha * (1-p)^gamma * (-log p)      = alpha * s(-x)^2 * softplus(-x)
    #   negative: (1-alpha) * p^gamma * (-log(1-p))   = (1-alpha) * s(x)^2 * softplus(x)
    nl = nk.neg(logits)
    sp = nk.sigmoid(nl)
    pos_term = nk.mul(nk.mul(sp, sp), nk.softplus(nl))
    sn = nk.sigmoid(logits)
    neg_term = nk.mul(nk.mul(sn, sn), nk.softplus(logits))
    total = nk.add(
        nk.mul_array(pos_term, FOCAL_ALPHA * pos),
        nk.mul_array(neg_term, (1.0 - FOCAL_ALPHA) * neg),
    )
    return nk.scale(nk.sum_all(total), 1.0 / n_pos)


# ------------------------------------------------------------------- box coding


def encode_hbb(det: Detection, center: np.ndarray, stride: float) -> np.ndarray:
    """(dcx, dcy, log w, log h) of the enclosing horizontal box, stride units."""
    hb = det.hbox
    cx = (hb.xmin + hb.xmax) / 2.0
    cy = (hb.ymin + hb.ymax) / 2.0
    return np.array(
        [
            (cx - center[0]) / stride,
            (cy - center[1]) / stride,
            math.log(hb.width / stride),
            math.log(hb.height / stride),
        ]
    )


def encode_obb(det: Detection, center: np.ndarray, stride: float) -> np.ndarray:
    """(dcx, dcy, log w, log h, theta) of the oriented box, stride units."""
    b = det.box
    return np.array(
        [
            (b.cx - center[0]) / stride,
            (b.cy - center[1]) / stride,
            math.log(b.w / stride),
            math.log(b.h / stride),
            b.theta,
        ]
    )


def decode_hbb(deltas: np.ndarray, center: np.ndarray, stride: float):
    cx = center[0] + deltas[0] * stride
    cy = center[1] + deltas[1] * stride
    w = math.exp(deltas[2]) * stride
    h = math.exp(deltas[3]) * stride
    from .geom import HorizontalBox

    return HorizontalBox(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)


def decode_obb(deltas: np.ndarray, center: np.ndarray, stride: float) -> OrientedBox:
    return OrientedBox(
        cx=center[0] + deltas[0] * stride,
        cy=center[1] + deltas[1] * stride,
        w=math.exp(deltas[2]) * stride,
        h=math.exp(deltas[3]) * stride,
        theta=normalize_angle(deltas[4]),
    )


def box_loss(
    output: HeadOutput,
    assignment: Assignment,
    gt: list[Detection],
    grid: FeatureGrid,
) -> nk.Tensor2D:
    """Smooth-L1 regression on assigned cells, averaged over positives.

    The horizontal branch regresses the enclosing box as stride-normalized
    (dcx, dcy, log w, log h). The oriented branch regresses the same four
    plus an angle channel compared through its (sin 2t, cos 2t) pair, which
    is what makes the loss blind to the half-turn symmetry of a rectangle.
    Returns exact 0 when nothing is assigned.
    """
    pos_cells = np.nonzero(assignment.cell_to_gt != BACKGROUND)[0]
    if pos_cells.size == 0:
        return nk.constant([[0.0]])
    n_pos = pos_cells.size
    hbb_t = np.zeros((n_pos, 4))
    obb_t = np.zeros((n_pos, 5))
    for r, ci in enumerate(pos_cells):
        det = gt[assignment.cell_to_gt[ci]]
        hbb_t[r] = encode_hbb(det, grid.centers[ci], grid.stride)
        obb_t[r] = encode_obb(det, grid.centers[ci], grid.stride)

    hbb_pred = nk.gather_rows(output.hbb_deltas, pos_cells)
    obb_pred = nk.gather_rows(output.obb_deltas, pos_cells)
    hbb_term = nk.sum_all(nk.smooth_l1(hbb_pred, hbb_t))

    lin_pred = nk.slice_cols(obb_pred, 0, 4)
    ang_pred = nk.scale(nk.slice_cols(obb_pred, 4, 5), 2.0)
    ang_sin = nk.sin(ang_pred)
    ang_cos = nk.cos(ang_pred)
    lin_term = nk.sum_all(nk.smooth_l1(lin_pred, obb_t[:, :4]))
    sin_term = nk.sum_all(nk.smooth_l1(ang_sin, np.sin(2.0 * obb_t[:, 4:5])))
    cos_term = nk.sum_all(nk.smooth_l1(ang_cos, np.cos(2.0 * obb_t[:, 4:5])))
    total = nk.add(nk.add(hbb_term, lin_term), nk.add(sin_term, cos_term))
    return nk.scale(total, 1.0 / n_pos)


def alignment_loss(l_ct: nk.Tensor2D, l_cls: nk.Tensor2D, l_box: nk.Tensor2D) -> nk.Tensor2D:
    """L_aln = L_ct + L_cls + L_box, unweighted."""
    return nk.add(nk.add(l_ct, l_cls), l_box)


def fusion_loss(l_ct: nk.Tensor2D, l_cls: nk.Tensor2D, l_box: nk.Tensor2D) -> nk.Tensor2D:
    """L_fus: same composition as the alignment loss, fed fused tensors."""
    return alignment_loss(l_ct, l_cls, l_box)


def total_loss(l_fus: nk.Tensor2D, l_aln: nk.Tensor2D) -> nk.Tensor2D:
    """L_det = L_fus + L_aln, unweighted; one backward trains both heads."""
    return nk.add(l_fus, l_aln)


# ------------------------------------------------------------ class embeddings


def assign_category_ids(
    categories: list[str], slots: int, rng: np.random.Generator
) -> dict[str, int]:
    """Injective random map from category names to embedding-table slots."""
    cats = list(dict.fromkeys(categories))
    if len(cats) > slots:
        raise ValueError(f"{len(cats)} categories exceed {slots} embedding slots")
    ids = rng.choice(slots, size=len(cats), replace=False)
    return {c: int(i) for c, i in zip(cats, ids)}


def attach_class_embeddings(
    batch: PromptBatch, table: ClassEmbeddingTable, rng: np.random.Generator
) -> PromptBatch:
    """Add a per-image random class embedding to every projected prompt.

    All prompts of one class receive the same table row; the row choice is
    a fresh injective random draw each call. The value-level counterpart of
    the in-graph add used during training (see the toy detector).
    """
    ids = assign_category_ids(batch.labels, table.slots, rng)
    prompts = [
        p.with_projected(_projected(p) + table.table[ids[lbl]])
        for p, lbl in zip(batch.prompts, batch.labels)
    ]
    return PromptBatch(
        prompts=prompts,
        labels=list(batch.labels),
        positives=batch.positives,
        negatives=batch.negatives,
        modality=batch.modality,
    )


def _projected(p):
    if p.projected is None:
        raise ValueError(
            f"prompt ({p.category}, {p.modality}, {p.prompt_id}) has no projected vector"
        )
    return p.projected


# ----------------------------------------------------------------- fusion block


@dataclass
class FusionLayerParams:
    p_attn: nk.AttnParams
    p_ln1: tuple[nk.Tensor2D, nk.Tensor2D]
    p_mlp: nk.MlpParams
    p_ln2: tuple[nk.Tensor2D, nk.Tensor2D]
    x_attn: nk.AttnParams
    x_ln1: tuple[nk.Tensor2D, nk.Tensor2D]
    x_mlp: nk.MlpParams
    x_ln2: tuple[nk.Tensor2D, nk.Tensor2D]


def init_fusion(
    rng: np.random.Generator,
    prefix: str,
    d_model: int = EMBED_DIM,
    n_layers: int = FUSION_LAYERS,
) -> dict[str, np.ndarray]:
    """Initial arrays for every fusion-layer parameter, flat-named."""
    out: dict[str, np.ndarray] = {}
    for i in range(n_layers):
        base = f"{prefix}.layer{i}"
        for side in ("p", "x"):
            out.update(nk.init_attn(rng, f"{base}.{side}_attn", d_model))
            out.update(nk.init_mlp(rng, f"{base}.{side}_mlp", d_model, 2 * d_model, d_model))
            for ln in ("ln1", "ln2"):
                out[f"{base}.{side}_{ln}.gamma"] = np.ones((1, d_model))
                out[f"{base}.{side}_{ln}.beta"] = np.zeros((1, d_model))
    return out


def fusion_params(
    leaves: dict[str, nk.Tensor2D], prefix: str, n_layers: int = FUSION_LAYERS
) -> list[FusionLayerParams]:
    layers = []
    for i in range(n_layers):
        base = f"{prefix}.layer{i}"
        layers.append(
            FusionLayerParams(
                p_attn=nk.attn_params(leaves, f"{base}.p_attn"),
                p_ln1=(leaves[f"{base}.p_ln1.gamma"], leaves[f"{base}.p_ln1.beta"]),
                p_mlp=nk.mlp_params(leaves, f"{base}.p_mlp"),
                p_ln2=(leaves[f"{base}.p_ln2.gamma"], leaves[f"{base}.p_ln2.beta"]),
                x_attn=nk.attn_params(leaves, f"{base}.x_attn"),
                x_ln1=(leaves[f"{base}.x_ln1.gamma"], leaves[f"{base}.x_ln1.beta"]),
                x_mlp=nk.mlp_params(leaves, f"{base}.x_mlp"),
                x_ln2=(leaves[f"{base}.x_ln2.gamma"], leaves[f"{base}.x_ln2.beta"]),
            )
        )
    return layers


def fusion_block(
    P: nk.Tensor2D,
    X: nk.Tensor2D,
    layers: list[FusionLayerParams],
    n_heads: int = DEFAULT_HEADS,
) -> tuple[nk.Tensor2D, nk.Tensor2D]:
    """Stacked prompt/feature cross-attention fusion.

    Per layer, with residuals always taken from that sub-block's input:
        P'    = LN(MHCA(P_i, X_i) + P_i)
        P_i+1 = LN(MLP(P') + P')
        X'    = LN(MHCA(X_i, P_i+1) + X_i)
        X_i+1 = LN(MLP(X') + X')
    """
    if P.cols != X.cols:
        raise ValueError(f"prompt width {P.cols} != feature width {X.cols}")
    for lp in layers:
        p_mid = nk.layer_norm(nk.add(nk.mhca(P, X, lp.p_attn, n_heads), P), *lp.p_ln1)
        P = nk.layer_norm(nk.add(nk.mlp2(p_mid, lp.p_mlp), p_mid), *lp.p_ln2)
        x_mid = nk.layer_norm(nk.add(nk.mhca(X, P, lp.x_attn, n_heads), X), *lp.x_ln1)
        X = nk.layer_norm(nk.add(nk.mlp2(x_mid, lp.x_mlp), x_mid), *lp.x_ln2)
    return P, X


# --------------------------------------------------------------------- decoding


def decode_detections(
    output: HeadOutput,
    logits: nk.Tensor2D,
    class_names: list[str],
    grid: FeatureGrid,
    score_thresh: float,
    nms_thresh: float,
    mode: str = "obb",
) -> list[Detection]:
    """Dense-head decoding: sigmoid scores, per-cell best class, delta
    decoding (exact inverse of the loss encoding), class-agnostic NMS.

    ``mode`` picks which regression branch becomes the emitted geometry:
    oriented boxes (with derived enclosing boxes) or the independent
    horizontal branch.
    """
    if mode not in ("obb", "hbb"):
        raise ValueError(f"mode must be 'obb' or 'hbb', got {mode!r}")
    scores = 1.0 / (1.0 + np.exp(-logits.array))
    best = scores.argmax(axis=1)
    dets: list[Detection] = []
    for ci in range(scores.shape[0]):
        sc = float(scores[ci, best[ci]])
        if sc < score_thresh:
            continue
        cat = class_names[best[ci]]
        if mode == "obb":
            box = decode_obb(output.obb_deltas.array[ci], grid.centers[ci], grid.stride)
            dets.append(Detection(category=cat, score=sc, box=box))
        else:
            hb = decode_hbb(output.hbb_deltas.array[ci], grid.centers[ci], grid.stride)
            dets.append(Detection(category=cat, score=sc, hbox=hb))
    return class_agnostic_nms(dets, nms_thresh, mode=mode)
