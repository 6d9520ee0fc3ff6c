"""
Low-rank adapters for the backbone's linear projections.

Placement rules:
- ``spatial`` sets target the self-attention (q, k, v, out) and feed-forward
  projections of spatial transformers.
- ``temporal`` sets target the same projections of temporal transformers.
- Nothing ever targets a cross-attention projection (``attn2``).

Adapters reach the forward pass in one of two ways. During training they are
installed on ``AdaptableLinear`` layers and add ``scale * up(down(x))`` to the
frozen output. At inference they are folded into a copy of the weights with
``merge_adapters`` and the model is called functionally, so the shared model
object is never mutated.
"""
import copy
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from apps.core.exceptions import (
    AdapterAttachError,
    AdapterShapeConflictError,
    PlacementError,
)

logger = logging.getLogger(__name__)

ADAPTER_KINDS = ('spatial', 'temporal')
DEFAULT_RANK = 32
DOWN_INIT_STD = 0.01

# (transformer, sub-layer) name pairs each kind may target.
_ELIGIBLE = {
    'spatial': {('spatial', 'attn1'), ('spatial', 'ff')},
    'temporal': {('temporal', 'attn1'), ('temporal', 'ff')},
}


class AdaptableLinear(nn.Linear):
    """A frozen linear projection that LoRA pairs can be installed on."""

    def __init__(self, in_features, out_features, bias=True):
        super().__init__(in_features, out_features, bias=bias)
        self.lora_pairs = []

    def forward(self, x):
        out = super().forward(x)
        for pair in self.lora_pairs:
            out = adapted_projection(x, out, pair)
        return out


def adapted_projection(x, base_out, lora):
    """``base_out + scale * up(down(x))``."""
    return base_out + lora.scale * F.linear(F.linear(x, lora.down), lora.up)


class LoraPair(nn.Module):
    """
    One low-rank update for a ``d_in -> d_out`` projection.

    ``down`` starts as small Gaussian noise and ``up`` as zeros, so a fresh
    pair leaves the projection's output unchanged. ``scale = alpha / rank``.
    """

    def __init__(self, d_in, d_out, rank=DEFAULT_RANK, alpha=None, generator=None,
                 dtype=torch.float32, init_std=DOWN_INIT_STD):
        super().__init__()
        if rank < 1 or rank > min(d_in, d_out):
            raise AdapterAttachError(f"LoRA rank {rank} must lie in [1, {min(d_in, d_out)}]")
        self.rank = rank
        self.alpha = float(rank if alpha is None else alpha)
        self.down = nn.Parameter(torch.randn(rank, d_in, generator=generator, dtype=dtype) * init_std)
        self.up = nn.Parameter(torch.zeros(d_out, rank, dtype=dtype))

    @property
    def scale(self):
        return self.alpha / self.rank

    @property
    def d_in(self):
        return self.down.shape[1]

    @property
    def d_out(self):
        return self.up.shape[0]

    def delta(self):
        """The dense ``[d_out, d_in]`` update this pair adds to its projection."""
        return self.scale * (self.up @ self.down)


@dataclass(eq=False)
class AdapterSet:
    """
    LoRA pairs keyed by the dotted path of the projection they adapt.

    Attributes:
    - kind (str): ``spatial`` or ``temporal``.
    - placement (dict[str, LoraPair]): layer path -> pair.
    - trainable (bool): frozen sets keep ``requires_grad`` off.
    """
    kind: str
    placement: dict = field(default_factory=dict)
    trainable: bool = True

    def __post_init__(self):
        if self.kind not in ADAPTER_KINDS:
            raise AdapterAttachError(f"Unknown adapter kind {self.kind!r}")
        self._apply_trainable()

    def _apply_trainable(self):
        for pair in self.placement.values():
            pair.requires_grad_(self.trainable)

    def freeze(self):
        self.trainable = False
        self._apply_trainable()
        return self

    def unfreeze(self):
        self.trainable = True
        self._apply_trainable()
        return self

    def parameters(self):
        for path in sorted(self.placement):
            yield from self.placement[path].parameters()

    def named_tensors(self):
        tensors = {}
        for path, pair in self.placement.items():
            tensors[f'{path}.down'] = pair.down.detach()
            tensors[f'{path}.up'] = pair.up.detach()
        return tensors

    def clone(self, trainable=None):
        twin = copy.deepcopy(self)
        twin.trainable = self.trainable if trainable is None else trainable
        twin._apply_trainable()
        return twin

    def __len__(self):
        return len(self.placement)


def _path_tags(path):
    parts = path.split('.')
    return set(zip(parts, parts[1:]))


def eligible_paths(model, kind):
    """Dotted paths of every projection ``kind`` may target, in module order."""
    allowed = _ELIGIBLE[kind]
    return [
        name for name, module in model.named_modules()
        if isinstance(module, AdaptableLinear) and _path_tags(name) & allowed
    ]


def validate_placement(model, adapter_set):
    """
    Raises:
    - PlacementError: a path does not exist, is not adaptable, or is outside
      the set's kind (cross-attention included).
    - AdapterShapeConflictError: a pair's shape does not fit its layer.
    """
    modules = dict(model.named_modules())
    allowed = _ELIGIBLE[adapter_set.kind]
    for path, pair in adapter_set.placement.items():
        module = modules.get(path)
        if not isinstance(module, AdaptableLinear):
            raise PlacementError(f"No adaptable projection at {path!r}")
        if not _path_tags(path) & allowed:
            raise PlacementError(f"{adapter_set.kind} adapters may not target {path!r}")
        if (pair.d_out, pair.d_in) != tuple(module.weight.shape):
            raise AdapterShapeConflictError(
                f"{path}: adapter {(pair.d_out, pair.d_in)} vs weight {tuple(module.weight.shape)}"
            )
    return modules


def install_adapters(model, adapter_set):
    """
    Register ``adapter_set`` on ``model`` so every forward pass uses it.

    Raises:
    - AdapterAttachError: a set of the same kind is already installed.
    """
    registry = model.adapter_sets
    if adapter_set.kind in registry:
        raise AdapterAttachError(f"{adapter_set.kind} adapters are already attached")
    modules = validate_placement(model, adapter_set)
    for path, pair in adapter_set.placement.items():
        modules[path].lora_pairs.append(pair)
    registry[adapter_set.kind] = adapter_set
    logger.debug("Installed %d %s adapters", len(adapter_set), adapter_set.kind)
    return adapter_set


def attach_adapters(model, kind, rank=DEFAULT_RANK, alpha=None, generator=None, trainable=True):
    """
    Create one LoRA pair on every eligible projection of ``kind`` and install
    the new set. Base weights are left untouched.
    """
    if kind not in ADAPTER_KINDS:
        raise AdapterAttachError(f"Unknown adapter kind {kind!r}")
    if kind in model.adapter_sets:
        raise AdapterAttachError(f"{kind} adapters are already attached")
    modules = dict(model.named_modules())
    placement = {}
    for path in eligible_paths(model, kind):
        weight = modules[path].weight
        placement[path] = LoraPair(
            weight.shape[1], weight.shape[0], rank=rank, alpha=alpha,
            generator=generator, dtype=weight.dtype,
        )
    return install_adapters(model, AdapterSet(kind, placement, trainable=trainable))


def detach_adapters(model, kind):
    """Uninstall and return the set of ``kind``."""
    adapter_set = model.adapter_sets.pop(kind, None)
    if adapter_set is None:
        raise AdapterAttachError(f"No {kind} adapters are attached")
    modules = dict(model.named_modules())
    for path, pair in adapter_set.placement.items():
        modules[path].lora_pairs = [p for p in modules[path].lora_pairs if p is not pair]
    return adapter_set


@contextmanager
def active_adapters(model, sets):
    """
    Temporarily run ``model`` with exactly ``sets`` active, whatever is
    installed. Installed sets are restored on exit.
    """
    modules = dict(model.named_modules())
    saved = {
        name: module.lora_pairs
        for name, module in modules.items()
        if isinstance(module, AdaptableLinear)
    }
    try:
        for name in saved:
            modules[name].lora_pairs = []
        for adapter_set in sets:
            validate_placement(model, adapter_set)
            for path, pair in adapter_set.placement.items():
                modules[path].lora_pairs.append(pair)
        yield model
    finally:
        for name, pairs in saved.items():
            modules[name].lora_pairs = pairs


def merge_adapters(base_weights, sets):
    """
    Fold adapter sets into a copy of ``base_weights`` (a state dict whose
    keys are ``<path>.weight``). Sets may share layer paths; their deltas add.

    Raises:
    - PlacementError: a set targets a layer missing from ``base_weights``.
    - AdapterShapeConflictError: a delta does not fit the weight it targets.
    """
    merged = dict(base_weights)
    for adapter_set in sets:
        for path, pair in adapter_set.placement.items():
            key = f'{path}.weight'
            if key not in merged:
                raise PlacementError(f"No weight {key!r} to merge into")
            delta = pair.delta().detach()
            if delta.shape != merged[key].shape:
                raise AdapterShapeConflictError(
                    f"{path}: delta {tuple(delta.shape)} vs weight {tuple(merged[key].shape)}"
                )
            merged[key] = merged[key] + delta.to(merged[key].dtype)
    return merged


def unmerge_adapters(merged_weights, sets):
    """Subtract the low-rank products again."""
    restored = dict(merged_weights)
    for adapter_set in sets:
        for path, pair in adapter_set.placement.items():
            key = f'{path}.weight'
            restored[key] = restored[key] - pair.delta().detach().to(restored[key].dtype)
    return restored
