"""A small but complete two-headed detector over procedural scenes.

The backbone is two linear+SiLU layers lifting 16-channel cells to the
common embedding width. On top sit the two heads exercised by training:

- the alignment head: embedding/box towers straight off the backbone,
  classified by scaled max similarity against prompt embeddings;
- the fusion head: prompts (shifted by per-image class embeddings) and
  cells exchange information through a cross-attention stack first, and
  its towers read the fused cells.

Each head owns a private shared MLP, towers, and (alpha, beta)
calibration; only the backbone and the class-embedding table are common
property. All parameters live in one flat name->array dict so the
optimizer, the checkpoint format, and gradient checks stay trivial.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .. import heads, numkit as nk
from ..geom import Detection
from ..promptdict import PromptBatch
from .scenes import SyntheticScene, grid_centers

BACKBONE_PREFIX = "bb."


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 256
    backbone_hidden: int = 64
    n_heads: int = 8
    fusion_layers: int = 3
    class_slots: int = 80
    feature_channels: int = 16

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )


def init_params(rng: np.random.Generator, config: ModelConfig) -> dict[str, np.ndarray]:
    """Fresh parameter dict; key layout is the checkpoint layout."""
    d = config.d_model
    params: dict[str, np.ndarray] = {}
    w, b = nk.init_linear(rng, config.feature_channels, config.backbone_hidden)
    params["bb.w1"], params["bb.b1"] = w, b
    w, b = nk.init_linear(rng, config.backbone_hidden, d)
    params["bb.w2"], params["bb.b2"] = w, b
    for side in ("aln", "fus"):
        params.update(nk.init_mlp(rng, f"{side}.shared", d, d, d))
        for tower, width in (("zproj", d), ("hbb", 4), ("obb", 5)):
            w, b = nk.init_linear(rng, d, width)
            params[f"{side}.{tower}.w"] = w
            params[f"{side}.{tower}.b"] = b
        # Cosines live in [-1, 1]; a unit scale caps the logit swing at
        # +/-1, so scores cannot separate and every classification
        # gradient into the embeddings is shrunk by the same factor. Too
        # hot a start (say the inverse contrastive temperature, 10) blows
        # up the first steps instead; 3 clears both hazards.
        params[f"{side}.alpha"] = np.array([[3.0]])
        # Start with a negative logit offset so the densely background
        # grid begins near "no object" instead of drowning the focal loss.
        params[f"{side}.beta"] = np.array([[-2.0]])
    params.update(
        heads.init_fusion(rng, "fb", d_model=d, n_layers=config.fusion_layers)
    )
    params["cls_table"] = rng.normal(0.0, 0.02, size=(config.class_slots, d))
    return params


def toy_backbone(
    field: np.ndarray | nk.Tensor2D,
    lv: dict[str, nk.Tensor2D],
) -> nk.Tensor2D:
    """Two linear+SiLU layers: raw cell channels -> d_model features."""
    x = field if isinstance(field, nk.Tensor2D) else nk.constant(field)
    h = nk.silu(nk.linear(x, lv["bb.w1"], lv["bb.b1"]))
    return nk.silu(nk.linear(h, lv["bb.w2"], lv["bb.b2"]))


def _id_rng(seed: int, image_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(image_id.encode("utf-8"))])


class ToyDetector:
    def __init__(self, params: dict[str, np.ndarray], config: ModelConfig | None = None):
        self.params = params
        self.config = config or ModelConfig()

    @classmethod
    def init(cls, rng: np.random.Generator, config: ModelConfig | None = None) -> "ToyDetector":
        config = config or ModelConfig()
        return cls(init_params(rng, config), config)

    # ------------------------------------------------------------- plumbing

    def leaves(self, tape: nk.Tape) -> dict[str, nk.Tensor2D]:
        return {k: tape.leaf(v) for k, v in self.params.items()}

    def constants(self) -> dict[str, nk.Tensor2D]:
        return {k: nk.constant(v) for k, v in self.params.items()}

    def feature_grid(
        self, lv: dict[str, nk.Tensor2D], scene: SyntheticScene
    ) -> heads.FeatureGrid:
        cells = toy_backbone(scene.field, lv)
        return heads.FeatureGrid(
            cells=cells,
            centers=grid_centers(scene.grid_h, scene.grid_w, float(scene.stride)),
            stride=float(scene.stride),
            grid_h=scene.grid_h,
            grid_w=scene.grid_w,
        )

    def _class_slot_ids(
        self, batch: PromptBatch, rng: np.random.Generator
    ) -> np.ndarray:
        ids = heads.assign_category_ids(
            batch.class_names(), self.config.class_slots, rng
        )
        return np.array([ids[label] for label in batch.labels], dtype=np.intp)

    def _head_output(
        self, side: str, lv: dict[str, nk.Tensor2D], cells: nk.Tensor2D
    ) -> heads.HeadOutput:
        def tower(name: str) -> nk.Tensor2D:
            return nk.linear(cells, lv[f"{side}.{name}.w"], lv[f"{side}.{name}.b"])

        return heads.HeadOutput(
            Z=tower("zproj"),
            hbb_deltas=tower("hbb"),
            obb_deltas=tower("obb"),
            alpha=lv[f"{side}.alpha"],
            beta=lv[f"{side}.beta"],
        )

    def _fused(
        self,
        lv: dict[str, nk.Tensor2D],
        grid_cells: nk.Tensor2D,
        prompts: nk.Tensor2D,
        slot_ids: np.ndarray,
    ) -> tuple[nk.Tensor2D, nk.Tensor2D]:
        p_cls = nk.add(prompts, nk.gather_rows(lv["cls_table"], slot_ids))
        layers = heads.fusion_params(lv, "fb", n_layers=self.config.fusion_layers)
        return heads.fusion_block(p_cls, grid_cells, layers, n_heads=self.config.n_heads)

    # ----------------------------------------------------------------- loss

    def detection_loss(
        self,
        tape: nk.Tape,
        scene: SyntheticScene,
        batch: PromptBatch,
        rng: np.random.Generator,
        gt: list[Detection] | None = None,
        tau: float = 0.1,
    ) -> tuple[nk.Tensor2D, dict[str, nk.Tensor2D]]:
        """Both heads' losses on one scene with one prompt batch.

        ``gt`` overrides the scene's own annotations (pseudo-label records
        train through here). ``rng`` draws the per-image class-embedding
        slots for the fusion head. Returns the loss and the parameter
        leaves so the caller can read gradients after ``backward``.
        """
        lv = self.leaves(tape)
        grid = self.feature_grid(lv, scene)
        targets = list(scene.gt) if gt is None else list(gt)
        asn = heads.assign(targets, grid)
        prompts = nk.constant(batch.projected_matrix())

        def side_loss(side: str, cells: nk.Tensor2D, p: nk.Tensor2D) -> nk.Tensor2D:
            out = self._head_output(side, lv, cells)
            shared = nk.mlp_params(lv, f"{side}.shared")
            # Bounded similarities: with z unnormalized the logit scale
            # rides on ||z||, and plain momentum SGD turns that freedom
            # into a feedback loop (watched it overflow within ~70
            # iterations). The cosine form is the trainable one here.
            logits, names = heads.class_logits(
                out.Z, p, batch.labels, out.alpha, out.beta, shared,
                normalize_z=True,
            )
            l_ct = heads.supcon_loss(
                nk.mlp2(out.Z, shared), nk.mlp2(p, shared), batch.labels, tau
            )
            l_cls = heads.cls_loss(logits, names, asn, targets)
            l_box = heads.box_loss(out, asn, targets, grid)
            return heads.alignment_loss(l_ct, l_cls, l_box)

        l_aln = side_loss("aln", grid.cells, prompts)
        pf, xf = self._fused(lv, grid.cells, prompts, self._class_slot_ids(batch, rng))
        # Global residual around the fusion stack: attention + LayerNorm
        # homogenize cell directions (pairwise cosines climb from ~0.73
        # to ~0.97), and the cosine classifier cannot separate cells
        # that all point the same way. The raw grid carries the per-cell
        # identity, the fused term carries the prompt conditioning.
        l_fus = side_loss("fus", nk.add(xf, grid.cells), pf)
        return heads.total_loss(l_fus, l_aln), lv

    # ------------------------------------------------------------ inference

    def detect(
        self,
        scene: SyntheticScene,
        batch: PromptBatch,
        head: str = "fusion",
        score_thresh: float = 0.05,
        nms_thresh: float = 0.5,
        id_seed: int = 0,
        mode: str = "obb",
    ) -> list[Detection]:
        """Run one head over a scene and decode detections.

        ``mode`` picks the emitted geometry: the oriented branch or the
        independent horizontal branch. The fusion head needs
        class-embedding slots; they are drawn from a generator keyed by
        (id_seed, image id), so repeat calls are reproducible image by
        image.
        """
        if head not in ("fusion", "alignment"):
            raise ValueError(f"head must be 'fusion' or 'alignment', got {head!r}")
        lv = self.constants()
        grid = self.feature_grid(lv, scene)
        prompts = nk.constant(batch.projected_matrix())
        if head == "fusion":
            slot_ids = self._class_slot_ids(batch, _id_rng(id_seed, scene.image_id))
            pf, xf = self._fused(lv, grid.cells, prompts, slot_ids)
            # Same global residual as the training path.
            cells = nk.add(xf, grid.cells)
            side = "fus"
        else:
            pf, cells = prompts, grid.cells
            side = "aln"
        out = self._head_output(side, lv, cells)
        logits, names = heads.class_logits(
            out.Z, pf, batch.labels, out.alpha, out.beta,
            nk.mlp_params(lv, f"{side}.shared"), normalize_z=True,
        )
        return heads.decode_detections(
            out, logits, names, grid, score_thresh, nms_thresh, mode=mode
        )
