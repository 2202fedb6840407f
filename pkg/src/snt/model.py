"""Assemble a tree-structured part parser from a hierarchy and run it end to end."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import ops
from .blocks import AggregationBlock, Backbone, PredictionBlock, RoutingBlock, skip_stage
from .hierarchy import TreeSpec, final_channel_order, leaf_target, routing_target, spec_hash, truncate
from .tensor import (
    ConfigurationError,
    Tensor,
    add,
    check_finite,
    concat,
    log,
    take_channels,
)

ABLATIONS = ("no_mask", "no_skip", "no_pred", "no_dconv")
MAGIC = b"SNT1"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    base_width: int = 16
    level_width: int = 64
    height_override: Optional[int] = None
    ablations: tuple = ()
    input_size: tuple = (64, 64)
    head_width: Optional[int] = None   # hidden width of prediction blocks (defaults to level_width)

    def __post_init__(self):
        object.__setattr__(self, "ablations", tuple(sorted(set(self.ablations))))
        object.__setattr__(self, "input_size", tuple(self.input_size))
        if self.base_width <= 0 or self.level_width <= 0 or (self.head_width is not None and self.head_width <= 0):
            raise ConfigurationError(f"widths must be positive: {self}")
        unknown = set(self.ablations) - set(ABLATIONS)
        if unknown:
            raise ConfigurationError(f"unknown ablations {sorted(unknown)}")
        h, w = self.input_size
        if h % 8 or w % 8 or h <= 0 or w <= 0:
            raise ConfigurationError(f"input_size {self.input_size} must be positive multiples of 8")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ablations"] = list(self.ablations)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{**d, "ablations": tuple(d.get("ablations", ())), "input_size": tuple(d.get("input_size", (64, 64)))})

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()).digest()


@dataclass
class ForwardOutputs:
    """All maps are at label-map resolution. Masks are probabilities, the rest logits."""
    routing_masks: dict = field(default_factory=dict)
    leaf_logits: dict = field(default_factory=dict)
    final_logits: Optional[Tensor] = None


@dataclass
class LossBreakdown:
    total: Tensor
    routing: float
    leaf: float
    final: float
    terms: dict


class SNTModel:
    def __init__(self, spec: TreeSpec, config: ModelConfig, rng: np.random.Generator):
        self.spec = spec
        self.config = config
        self.train_mode = True
        if config.height_override is not None and not 0 <= config.height_override <= spec.height:
            raise ConfigurationError(f"height_override {config.height_override} outside [0, {spec.height}]")
        height = spec.height if config.height_override is None else config.height_override
        self.tree = truncate(spec, height)
        abl = set(config.ablations)
        lw = config.level_width
        hw = config.head_width or lw
        deformable = "no_dconv" not in abl
        self.backbone = Backbone(config.base_width, lw, rng)
        blocks = [self.backbone]
        self.routing: dict = {}
        self.aggregation: dict = {}
        self.prediction: dict = {}
        self.final_head = None
        if self.tree is None:
            self.final_head = PredictionBlock("flat_head", lw, hw, spec.num_labels, rng, deformable)
            blocks.append(self.final_head)
        else:
            for node in self.tree.root.walk():
                if node.is_leaf:
                    s = skip_stage(node.level)
                    agg = AggregationBlock(node.node_id, lw, self.backbone.widths[s - 1], rng,
                                           use_skip="no_skip" not in abl)
                    pred = PredictionBlock(f"{node.node_id}.prediction", lw, hw, node.num_channels, rng, deformable)
                    self.aggregation[node.node_id] = agg
                    self.prediction[node.node_id] = pred
                    blocks += [agg, pred]
                elif "no_mask" not in abl:
                    rb = RoutingBlock(node.node_id, lw, node.num_channels, rng)
                    self.routing[node.node_id] = rb
                    blocks.append(rb)
            if "no_pred" not in abl:
                self.final_head = PredictionBlock("final_head", spec.num_labels, hw, spec.num_labels, rng, deformable)
                blocks.append(self.final_head)
            self.channel_order = final_channel_order(self.tree)
            fg = sum(l.num_channels - 1 for l in self.tree.leaves())
            if fg != spec.num_labels or len(self.channel_order) != spec.num_labels:
                raise ConfigurationError(f"leaf foreground channels {fg} do not cover {spec.num_labels} labels")
        params, buffers = {}, {}
        for b in blocks:
            params.update(b.params)
            buffers.update(b.buffers)
        self.params = dict(sorted(params.items()))
        self.buffers = dict(sorted(buffers.items()))

    # -- bookkeeping ------------------------------------------------------------
    def parameters(self) -> list:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def train(self) -> "SNTModel":
        self.train_mode = True
        return self

    def eval(self) -> "SNTModel":
        self.train_mode = False
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @property
    def final_head_in_channels(self) -> int:
        if self.final_head is None:
            return 0
        return self.final_head.conv1.weight.shape[1]

    # -- forward --------------------------------------------------------------------
    def forward(self, images, rng: Optional[np.random.Generator] = None) -> ForwardOutputs:
        x = images if isinstance(images, Tensor) else Tensor(images)
        if tuple(x.shape[2:]) != tuple(self.config.input_size):
            raise ConfigurationError(f"image dims {x.shape[2:]} do not match config {self.config.input_size}")
        train = self.train_mode
        H, W = x.shape[2:]
        feats = self.backbone(x, train)
        check_finite(feats.reduced, "backbone.reduce")
        out = ForwardOutputs()
        if self.tree is None:
            logits = self.final_head(feats.reduced, train, rng)
            check_finite(logits, "flat_head")
            out.final_logits = ops.upsample_bilinear(logits, H, W)
            return out

        native = {}

        def visit(node, features: Tensor):
            if node.is_leaf:
                skip = feats.stages[skip_stage(node.level) - 1]
                agg = self.aggregation[node.node_id](features, skip)
                check_finite(agg, f"{node.node_id}.aggregation")
                logits = self.prediction[node.node_id](agg, train, rng)
                check_finite(logits, f"{node.node_id}.prediction")
                native[node.node_id] = logits
                return
            if node.node_id in self.routing:
                r = self.routing[node.node_id](features, train, rng)
                check_finite(r.mask, f"{node.node_id}.routing")
                out.routing_masks[node.node_id] = ops.upsample_bilinear(r.mask, H, W)
                guided = r.guided
            else:
                guided = [features] * len(node.children)
            for child, g in zip(node.children, guided):
                visit(child, g)

        visit(self.tree.root, feats.reduced)
        for leaf_id, logits in native.items():
            out.leaf_logits[leaf_id] = ops.upsample_bilinear(logits, H, W)

        if self.final_head is None:
            # no_pred: renormalized leaf foreground probabilities
            fg = self._gather_foreground({k: ops.softmax_channels(v) for k, v in out.leaf_logits.items()})
            out.final_logits = log(fg, floor=ops.PROB_FLOOR)
            return out
        hh = max(v.shape[2] for v in native.values())
        ww = max(v.shape[3] for v in native.values())
        fg = self._gather_foreground({k: ops.upsample_bilinear(v, hh, ww) for k, v in native.items()})
        logits = self.final_head(fg, train, rng)
        check_finite(logits, "final_head")
        out.final_logits = ops.upsample_bilinear(logits, H, W)
        return out

    __call__ = forward

    def _gather_foreground(self, maps: dict) -> Tensor:
        """Concatenate every leaf's foreground channels in global label order."""
        leaf_ids = [l.node_id for l in self.tree.leaves()]
        offset, start = 0, {}
        parts = []
        for lid in leaf_ids:
            n_fg = self.tree.node(lid).num_channels - 1
            parts.append(take_channels(maps[lid], range(n_fg)))
            start[lid] = offset
            offset += n_fg
        stacked = concat(parts, axis=1)
        perm = [start[lid] + ch for lid, ch in self.channel_order]
        if perm == list(range(len(perm))):
            return stacked
        return take_channels(stacked, perm)

    # -- loss / prediction ------------------------------------------------------------
    def total_loss(self, outputs: ForwardOutputs, labels: np.ndarray) -> LossBreakdown:
        return total_loss(outputs, labels, self.tree, self.spec.num_labels)


def build_model(spec: TreeSpec, config: ModelConfig, rng: Union[np.random.Generator, int, None] = 0) -> SNTModel:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return SNTModel(spec, config, rng)


def total_loss(outputs: ForwardOutputs, labels: np.ndarray, tree: Optional[TreeSpec], num_labels: int) -> LossBreakdown:
    """Unweighted sum of routing, leaf and final cross-entropy terms."""
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    terms = {}
    routing = []
    leaf = []
    if tree is not None:
        for node_id, mask in outputs.routing_masks.items():
            t = routing_target(labels, tree.node(node_id), num_labels)
            terms[f"routing/{node_id}"] = term = ops.nll_probs(mask, t)
            routing.append(term)
        for leaf_id, logits in outputs.leaf_logits.items():
            t = leaf_target(labels, tree.node(leaf_id), num_labels)
            terms[f"leaf/{leaf_id}"] = term = ops.cross_entropy_spatial(logits, t)
            leaf.append(term)
    bad = (labels != ops.IGNORE_INDEX) & ((labels < 0) | (labels >= num_labels))
    if np.any(bad):
        raise ValueError(f"label ids {np.unique(labels[bad]).tolist()} outside the label set")
    if outputs.final_logits.shape[1] == num_labels:
        final = ops.cross_entropy_spatial(outputs.final_logits, labels)
    else:
        raise ConfigurationError(f"final logits carry {outputs.final_logits.shape[1]} channels, expected {num_labels}")
    terms["final"] = final

    def tsum(ts):
        acc = None
        for t in ts:
            acc = t if acc is None else add(acc, t)
        return acc

    r, l = tsum(routing), tsum(leaf)
    total = final
    for part in (l, r):
        if part is not None:
            total = add(part, total)
    return LossBreakdown(total,
                         routing=r.item() if r is not None else 0.0,
                         leaf=l.item() if l is not None else 0.0,
                         final=final.item(),
                         terms={k: v.item() for k, v in terms.items()})


def predict_labels(outputs: ForwardOutputs) -> np.ndarray:
    """Per-pixel argmax over final logits; ties go to the lower label id."""
    return np.argmax(outputs.final_logits.data, axis=1).astype(np.uint8)


def predict_probabilities(outputs: ForwardOutputs) -> np.ndarray:
    return ops.softmax_channels(outputs.final_logits.detach()).data


# -- checkpoints --------------------------------------------------------------------

class CheckpointError(ValueError):
    pass


def _state(model: SNTModel) -> dict:
    state = {name: p.data for name, p in model.params.items()}
    state.update(model.buffers)
    return dict(sorted(state.items()))


def checkpoint_bytes(model: SNTModel) -> bytes:
    state = _state(model)
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION), spec_hash(model.spec), model.config.digest(),
              struct.pack("<Q", len(state))]
    for name, arr in state.items():
        raw = name.encode()
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def save_checkpoint(model: SNTModel, path: Union[str, Path]) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def read_checkpoint(data: bytes) -> tuple:
    """Decode to (spec_hash, config_digest, {name: array})."""
    if len(data) < 4 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError("truncated checkpoint")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    shash = take(32)
    cdigest = take(32)
    (count,) = struct.unpack("<Q", take(8))
    state = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode()
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        size = int(np.prod(dims)) if dims else 1
        state[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims)
    if pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return shash, cdigest, state


def load_checkpoint(path: Union[str, Path], spec: TreeSpec, config: ModelConfig) -> SNTModel:
    shash, cdigest, state = read_checkpoint(Path(path).read_bytes())
    if shash != spec_hash(spec):
        raise CheckpointError("spec-hash mismatch: checkpoint was trained with a different hierarchy")
    if cdigest != config.digest():
        raise CheckpointError("config digest mismatch: checkpoint was trained with a different model config")
    model = build_model(spec, config, 0)
    expected = set(model.params) | set(model.buffers)
    if set(state) != expected:
        raise CheckpointError("checkpoint tensors do not match the model layout")
    for name, arr in state.items():
        if name in model.params:
            p = model.params[name]
            if p.data.shape != arr.shape:
                raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.astype(p.data.dtype)
        else:
            model.buffers[name][...] = arr
    model.eval()
    return model
