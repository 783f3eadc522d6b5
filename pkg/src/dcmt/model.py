"""Full cross-modal model: character and patch streams, one adaptive
hierarchical encoder per modality, a shared contrastive temperature, and
a linear answer head over fused embeddings.

Variants rewire the same skeleton: `no_adaptive` swaps the learned
boundary detectors for a fixed-width chunker, `no_topdown` disables the
refinement rounds, and `baseline_static` does both. Parameter creation
order is arranged so variants that share a component draw identical
initial values from the seed.
"""

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .alignment import TAU_MAX, TAU_MIN, AlignmentHead, info_nce, similarity_matrix
from .errors import ConfigError, ContractError, DimensionError
from .hierarchy import TransformerBlock, default_k_max, encode_hierarchy
from .params import gaussian, zeros
from .rng import Rng
from .segmentation import BoundaryDetector
from .synthdata import ANSWERS, GLYPH, VOCAB, encode_text
from .tensor import Tensor

VARIANTS = ("dcmt", "no_adaptive", "no_topdown", "baseline_static")
PATCH_DIM = 3 * GLYPH * GLYPH
MODALITIES = ("text", "image")


@dataclass(frozen=True)
class ModelConfig:
    d: int = 16
    n_heads: int = 1
    levels: int = 3
    rounds: int = 2
    window: int = 5
    detector_hidden: int = 32
    chunk_width: int = 4
    k_max_rule: str = "half-plus-two"
    tau_init: float = 0.07
    lambda_align: float = 1.0
    variant: str = "dcmt"
    seed: int = 0
    max_text_len: int = 256
    max_image_patches: int = 64

    @property
    def adaptive(self) -> bool:
        return self.variant in ("dcmt", "no_topdown")

    def validate(self):
        if self.d < 2 or self.d % self.n_heads != 0:
            raise ConfigError(f"d={self.d} must be a positive multiple of n_heads={self.n_heads}")
        if self.levels < 2:
            raise ConfigError("hierarchy needs at least 2 levels")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.variant in ("no_topdown", "baseline_static") and self.rounds != 1:
            raise ConfigError(f"variant {self.variant} runs a single round, got rounds={self.rounds}")
        if self.window < 1 or self.detector_hidden < 1:
            raise ConfigError("detector dims must be positive")
        if self.chunk_width < 2:
            raise ConfigError("chunk_width must be >= 2 so chunk counts fit the slot budget")
        if self.k_max_rule != "half-plus-two":
            raise ConfigError(f"unknown k_max rule {self.k_max_rule!r}")
        if not (TAU_MIN <= self.tau_init <= TAU_MAX):
            raise ConfigError(f"tau_init {self.tau_init} outside [{TAU_MIN}, {TAU_MAX}]")
        if self.lambda_align < 0:
            raise ConfigError("lambda_align must be nonnegative")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        if self.max_text_len < 1 or self.max_image_patches < 1:
            raise ConfigError("stream length caps must be positive")

    def for_variant(self, variant: str) -> "ModelConfig":
        rounds = 1 if variant in ("no_topdown", "baseline_static") else self.rounds
        cfg = dataclasses.replace(self, variant=variant, rounds=rounds)
        cfg.validate()
        return cfg

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {', '.join(unknown)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg


class FixedChunker:
    """Context-independent segmenter: a boundary before every position at
    a multiple of `width`. Stands in for static tokenization."""

    def __init__(self, width: int):
        if width < 2:
            raise ContractError("chunk width must be >= 2")
        self.width = width

    def probs(self, embeddings: Tensor, valid: np.ndarray | None = None) -> Tensor:
        n = embeddings.shape[0]
        b = np.array([1.0 if t > 0 and t % self.width == 0 else 0.0 for t in range(n)])
        if valid is not None:
            b = b * valid.astype(float)
        return Tensor(b)


def patchify(raster: np.ndarray) -> np.ndarray:
    """3×H×W raster to a raster-order (H/8)(W/8) × 192 patch matrix."""
    if raster.ndim != 3 or raster.shape[0] != 3:
        raise DimensionError(f"raster must be 3×H×W, got {raster.shape}")
    _, h, w = raster.shape
    if h % GLYPH or w % GLYPH:
        raise DimensionError(f"raster sides must be multiples of {GLYPH}, got {h}×{w}")
    hp, wp = h // GLYPH, w // GLYPH
    tiles = raster.reshape(3, hp, GLYPH, wp, GLYPH).transpose(1, 3, 0, 2, 4)
    return np.ascontiguousarray(tiles.reshape(hp * wp, PATCH_DIM))


class CrossModalModel:
    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        rng = Rng(config.seed)
        d = config.d

        self.char_embed = gaussian(rng, (len(VOCAB), d), 1.0 / math.sqrt(d))
        self.text_pos = gaussian(rng, (config.max_text_len, d), 1.0 / math.sqrt(d))
        self.patch_proj = gaussian(rng, (PATCH_DIM, d), 1.0 / math.sqrt(PATCH_DIM))
        self.patch_bias = zeros(d)
        self.image_pos = gaussian(rng, (config.max_image_patches, d), 1.0 / math.sqrt(d))

        self.blocks = {
            m: [TransformerBlock(d, config.n_heads, rng) for _ in range(config.levels)]
            for m in MODALITIES
        }
        # shared-component variants must consume the seed stream
        # identically, so optional parts come after the always-on ones
        if config.adaptive:
            self.detectors = {
                m: [
                    BoundaryDetector(d, config.window, config.detector_hidden, rng)
                    for _ in range(config.levels - 1)
                ]
                for m in MODALITIES
            }
            self._chunker = None
        else:
            self.detectors = None
            self._chunker = FixedChunker(config.chunk_width)
        if config.rounds > 1:
            self.td_projs = {
                m: [gaussian(rng, (d, d), 1.0 / math.sqrt(d)) for _ in range(config.levels - 1)]
                for m in MODALITIES
            }
        else:
            self.td_projs = None

        self.align = AlignmentHead(config.tau_init)
        self.head_w = gaussian(rng, (2 * d, len(ANSWERS)), 1.0 / math.sqrt(2 * d))
        self.head_b = zeros(len(ANSWERS))

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {
            "text.char_embed": self.char_embed,
            "text.pos": self.text_pos,
            "image.patch_proj": self.patch_proj,
            "image.patch_bias": self.patch_bias,
            "image.pos": self.image_pos,
        }
        for m in MODALITIES:
            for l, block in enumerate(self.blocks[m]):
                out.update(block.named_parameters(f"{m}.block{l}"))
        if self.detectors is not None:
            for m in MODALITIES:
                for l, det in enumerate(self.detectors[m]):
                    out.update(det.named_parameters(f"{m}.seg{l}"))
        if self.td_projs is not None:
            for m in MODALITIES:
                for l, proj in enumerate(self.td_projs[m]):
                    out[f"{m}.td{l}"] = proj
        out.update(self.align.named_parameters())
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def _segmenters(self, modality: str) -> list:
        if self.detectors is not None:
            return self.detectors[modality]
        return [self._chunker] * (self.config.levels - 1)

    def detector_calls(self) -> int:
        if self.detectors is None:
            return 0
        return sum(det.calls for m in MODALITIES for det in self.detectors[m])

    def _projs(self, modality: str):
        return None if self.td_projs is None else self.td_projs[modality]

    def encode_caption(self, text: str) -> list:
        ids = encode_text(text)
        if len(ids) > self.config.max_text_len:
            raise ContractError(f"text of {len(ids)} chars exceeds cap {self.config.max_text_len}")
        x0 = T.gather_rows(self.char_embed, ids) + T.gather_rows(self.text_pos, list(range(len(ids))))
        return encode_hierarchy(
            x0, self._segmenters("text"), self.blocks["text"], self._projs("text"),
            self.config.rounds, default_k_max,
        )

    def encode_raster(self, raster: np.ndarray) -> list:
        patches = patchify(raster)
        p = patches.shape[0]
        if p > self.config.max_image_patches:
            raise ContractError(f"{p} patches exceed cap {self.config.max_image_patches}")
        x0 = T.matmul(Tensor(patches), self.patch_proj) + self.patch_bias
        x0 = x0 + T.gather_rows(self.image_pos, list(range(p)))
        return encode_hierarchy(
            x0, self._segmenters("image"), self.blocks["image"], self._projs("image"),
            self.config.rounds, default_k_max,
        )

    @staticmethod
    def pooled(states: list) -> Tensor:
        """Occupancy-weighted mean of the top level's token states."""
        top = states[-1]
        occ = top.occupancy
        w = occ / T.sum_(occ)
        k = occ.shape[0]
        return T.reshape(T.matmul(T.reshape(w, (1, k)), top.h), (top.h.shape[1],))

    def text_embedding(self, text: str) -> Tensor:
        return self.pooled(self.encode_caption(text))

    def image_embedding(self, raster: np.ndarray) -> Tensor:
        return self.pooled(self.encode_raster(raster))

    def answer_logits(self, raster: np.ndarray, question: str) -> Tensor:
        """Linear head over the two pooled embeddings, concatenated."""
        fused = T.concat([self.image_embedding(raster), self.text_embedding(question)])
        d2 = fused.shape[0]
        return T.reshape(T.matmul(T.reshape(fused, (1, d2)), self.head_w) + self.head_b, (len(ANSWERS),))

    def predict_answer(self, raster: np.ndarray, question: str) -> str:
        return ANSWERS[int(np.argmax(self.answer_logits(raster, question).data))]

    def total_loss(self, kind: str, items: list) -> tuple[Tensor, dict]:
        """L = L_task + lambda * L_align over one same-kind batch.

        For caption matching the task IS the alignment, so the total
        reduces to (1 + lambda) * InfoNCE. For VQA the task is answer
        cross-entropy and the alignment term pairs images with their
        questions. Probe kinds carry no training objective.
        """
        lam = self.config.lambda_align
        if kind == "matching":
            imgs = T.stack([self.image_embedding(it.raster) for it in items])
            txts = T.stack([self.text_embedding(it.caption.text) for it in items])
            s = similarity_matrix(imgs, txts)
            l_align = info_nce(s, self.align.tau)
            loss = l_align * (1.0 + lam)
            task = l_align
        elif kind == "vqa":
            imgs, qs, ces = [], [], []
            for it in items:
                img = self.image_embedding(it.raster)
                q = self.text_embedding(it.payload["question"])
                imgs.append(img)
                qs.append(q)
                fused = T.reshape(T.concat([img, q]), (1, 2 * self.config.d))
                logp = T.log_softmax(T.matmul(fused, self.head_w) + self.head_b, axis=-1)
                aid = ANSWERS.index(it.payload["answer"])
                ces.append(-T.reshape(T.slice_cols(logp, aid, aid + 1), (1,)))
            task = T.mean(T.concat(ces))
            s = similarity_matrix(T.stack(imgs), T.stack(qs))
            l_align = info_nce(s, self.align.tau)
            loss = task + l_align * lam
        else:
            raise ContractError(f"kind {kind!r} has no training objective")
        stats = {
            "task_loss": float(task.data),
            "align_loss": float(l_align.data),
            "mi_bound": max(0.0, math.log(s.shape[0]) - float(l_align.data)),
        }
        return loss, stats
