"""Two-branch self-supervised learner.

An online branch (encoder + predictor) is trained by gradient descent to
align its normalized predictions across two augmented views of the same
image; a target branch (encoder only) follows the online encoder as an
exponential moving average and never receives gradients. The predictor
exists only on the online branch; that asymmetry is what prevents the
representations from collapsing to a constant.
"""

import math
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from cxr_sslx import backbones
from cxr_sslx.config import TrainConfig
from cxr_sslx.errors import CheckpointError, NumericalError
from cxr_sslx import seeding

_BOUND_TOL = 1e-4


class ParameterSet:
    """Ordered name -> dense array snapshot of a module's parameters and
    buffers. Immutable by convention: exported snapshots are safe to hand
    between threads."""

    def __init__(self, blobs: dict):
        self.blobs = {str(k): np.asarray(v) for k, v in blobs.items()}

    @classmethod
    def from_module(cls, module: nn.Module, prefix: str = "") -> "ParameterSet":
        blobs = {}
        for name, tensor in module.state_dict().items():
            blobs[prefix + name] = tensor.detach().cpu().numpy().copy()
        return cls(blobs)

    def apply_to_module(self, module: nn.Module, prefix: str = "") -> None:
        """Load blobs with the given prefix into the module, casting each
        array to the dtype the module already uses."""
        state = module.state_dict()
        tensors = {}
        for name, tensor in state.items():
            full = prefix + name
            if full not in self.blobs:
                raise CheckpointError(f"missing blob {full!r}")
            arr = self.blobs[full]
            if tuple(arr.shape) != tuple(tensor.shape):
                raise CheckpointError(
                    f"shape mismatch for {full!r}: checkpoint {tuple(arr.shape)} "
                    f"vs module {tuple(tensor.shape)}")
            tensors[name] = torch.as_tensor(arr).to(tensor.dtype)
        module.load_state_dict(tensors)

    def subset(self, prefix: str) -> "ParameterSet":
        """Blobs under `prefix`, with the prefix stripped."""
        return ParameterSet({k[len(prefix):]: v for k, v in self.blobs.items()
                             if k.startswith(prefix)})

    def names(self) -> list:
        return list(self.blobs)

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.blobs.values()
                   if np.issubdtype(v.dtype, np.floating))

    def same_structure(self, other: "ParameterSet") -> bool:
        return (self.names() == other.names()
                and all(self.blobs[k].shape == other.blobs[k].shape for k in self.blobs))

    def bit_equal(self, other: "ParameterSet") -> bool:
        if not self.same_structure(other):
            return False
        return all(self.blobs[k].tobytes() == other.blobs[k].tobytes()
                   for k in self.blobs)

    def __len__(self):
        return len(self.blobs)


@dataclass
class LossValue:
    """Total alignment loss and its two view-comparison terms."""

    total: float
    l1: float
    l2: float

    def __post_init__(self):
        if not (-_BOUND_TOL <= self.l1 <= 4 + _BOUND_TOL
                and -_BOUND_TOL <= self.l2 <= 4 + _BOUND_TOL):
            raise NumericalError(f"loss terms out of [0, 4]: l1={self.l1}, l2={self.l2}")
        if abs(self.total - (self.l1 + self.l2)) > _BOUND_TOL:
            raise NumericalError(f"total {self.total} != l1 + l2 = {self.l1 + self.l2}")


class ProjectionMLP(nn.Module):
    """linear -> batch norm -> ReLU -> linear."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden_dim),
            nn.BatchNorm1d(hidden_dim),
            nn.ReLU(inplace=True),
            nn.Linear(hidden_dim, out_dim),
        )

    def forward(self, x):
        return self.net(x)


class Encoder(nn.Module):
    """Backbone followed by the projection MLP; maps images to projection
    vectors."""

    def __init__(self, backbone: nn.Module, feature_dim: int,
                 mlp_hidden: int, projection_size: int):
        super().__init__()
        self.backbone = backbone
        self.projector = ProjectionMLP(feature_dim, mlp_hidden, projection_size)
        self.feature_dim = feature_dim
        self.projection_size = projection_size

    def forward(self, x):
        return self.projector(self.backbone(x))


class OnlineBranch(nn.Module):
    """Gradient-trained branch: encoder plus predictor. The predictor input
    and output widths equal the encoder's projection width."""

    def __init__(self, encoder: Encoder, mlp_hidden: int):
        super().__init__()
        self.encoder = encoder
        self.predictor = ProjectionMLP(
            encoder.projection_size, mlp_hidden, encoder.projection_size)


class TargetBranch(nn.Module):
    """Moving-average branch: encoder only, never optimized directly.

    Kept permanently in inference-statistics mode; its normalization
    statistics change only through the moving-average update.
    """

    def __init__(self, encoder: Encoder):
        super().__init__()
        self.encoder = encoder
        for p in self.encoder.parameters():
            p.requires_grad_(False)
        self.encoder.eval()

    def train(self, mode: bool = True):
        # stays in eval mode regardless of the surrounding train() calls
        return super().train(False)


def l2_normalize(v) -> np.ndarray:
    """Scale a vector to unit Euclidean norm."""
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise ValueError("cannot normalize a zero-norm vector")
    return v / norm


def alignment_loss(a, b) -> float:
    """Squared distance between the unit-normalized vectors: 2 - 2*cos(a, b).

    Symmetric, invariant to positive rescaling of either argument, and
    bounded to [0, 4].
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cannot compare zero-norm vectors")
    value = 2.0 - 2.0 * float(np.dot(a, b)) / (na * nb)
    return min(max(value, 0.0), 4.0)


def _to_tensor(x, dtype=torch.float32) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype) if x.dtype != dtype else x
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def _check_nonzero_rows(x: torch.Tensor, name: str) -> None:
    norms = x.detach().norm(dim=1)
    if bool((norms == 0).any()):
        raise ValueError(f"{name} contains zero-norm rows")


def _alignment_term(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Batch mean of 2 - 2*cos per row pair, keeping the autograd graph."""
    xn = F.normalize(x, dim=1)
    yn = F.normalize(y, dim=1)
    return (2.0 - 2.0 * (xn * yn).sum(dim=1)).mean()


def _loss_terms(p1: torch.Tensor, p2: torch.Tensor, y2_target: torch.Tensor,
                y1_target: Optional[torch.Tensor] = None,
                variant: str = "paper") -> tuple[torch.Tensor, torch.Tensor]:
    if p1.shape != p2.shape or p1.shape != y2_target.shape:
        raise ValueError(
            f"projection shape mismatch: {tuple(p1.shape)}, {tuple(p2.shape)}, "
            f"{tuple(y2_target.shape)}")
    for name, x in (("p1", p1), ("p2", p2), ("target projection", y2_target)):
        _check_nonzero_rows(x, name)
    if variant == "paper":
        return _alignment_term(p1, p2), _alignment_term(p2, y2_target)
    if variant == "byol_symmetric":
        if y1_target is None:
            raise ValueError("byol_symmetric variant needs the target output for view 1")
        _check_nonzero_rows(y1_target, "target projection (view 1)")
        return _alignment_term(p1, y2_target), _alignment_term(p2, y1_target)
    raise ValueError(f"unknown loss variant {variant!r}")


def ssl_loss(p1, p2, y2_target) -> LossValue:
    """Total alignment loss: the prediction-vs-prediction term between the
    two views plus the prediction-vs-target term on the second view, each
    averaged over the batch."""
    p1 = _to_tensor(p1, torch.float64).detach()
    p2 = _to_tensor(p2, torch.float64).detach()
    y2 = _to_tensor(y2_target, torch.float64).detach()
    l1, l2 = _loss_terms(p1, p2, y2)
    l1, l2 = float(l1), float(l2)
    return LossValue(total=l1 + l2, l1=l1, l2=l2)


def forward_views(online: OnlineBranch, target: TargetBranch,
                  v1, v2) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Run both views through both branches.

    Returns (p1, p2, y2_target): the online predictions for each view and
    the target encoder's output for the second view. The target output is
    detached from autograd, so no gradient ever reaches the target
    parameters; p1 and p2 depend only on the online parameters.
    """
    dtype = next(online.parameters()).dtype
    v1 = _to_tensor(v1, dtype)
    v2 = _to_tensor(v2, dtype)
    if v1.shape != v2.shape:
        raise ValueError(f"view shape mismatch: {tuple(v1.shape)} vs {tuple(v2.shape)}")
    p1 = online.predictor(online.encoder(v1))
    p2 = online.predictor(online.encoder(v2))
    with torch.no_grad():
        y2_target = target.encoder(v2).detach()
    return p1, p2, y2_target


def ema_update(target_params: ParameterSet, online_params: ParameterSet,
               tau: float) -> ParameterSet:
    """Elementwise convex combination tau*target + (1-tau)*online.

    Computed in double precision then cast back, so every output element
    lies in the closed interval between its two inputs. Integer blobs
    (normalization step counters) take the rounded combination, which
    preserves the tau = 0 and tau = 1 fixed points exactly.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    if target_params.names() != online_params.names():
        raise ValueError("parameter sets have different blob names")
    out = {}
    for name in target_params.names():
        t = target_params.blobs[name]
        o = online_params.blobs[name]
        if t.shape != o.shape:
            raise ValueError(f"shape mismatch for {name!r}: {t.shape} vs {o.shape}")
        mixed = tau * t.astype(np.float64) + (1.0 - tau) * o.astype(np.float64)
        if not np.issubdtype(t.dtype, np.floating):
            mixed = np.round(mixed)
        out[name] = mixed.astype(t.dtype)
    return ParameterSet(out)


@torch.no_grad()
def ema_update_module_(target: nn.Module, online: nn.Module, tau: float) -> None:
    """In-place moving-average update of every target blob from the online
    module, bit-identical to `ema_update` on the exported parameter sets."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    t_state = target.state_dict()
    o_state = online.state_dict()
    if list(t_state) != list(o_state):
        raise ValueError("target and online modules have different blob names")
    for name, t in t_state.items():
        o = o_state[name]
        mixed = tau * t.double() + (1.0 - tau) * o.double()
        if not t.is_floating_point():
            mixed = mixed.round()
        t.copy_(mixed.to(t.dtype))


def sgd_with_decay_groups(modules: Iterable[nn.Module], lr: float,
                          momentum: float, weight_decay: float) -> torch.optim.SGD:
    """SGD with momentum; weight decay applies to everything except
    normalization-layer scales and offsets."""
    norm_types = (nn.BatchNorm1d, nn.BatchNorm2d, nn.BatchNorm3d,
                  nn.GroupNorm, nn.LayerNorm)
    decay, no_decay = [], []
    for module in modules:
        for m in module.modules():
            for p in m.parameters(recurse=False):
                if not p.requires_grad:
                    continue
                (no_decay if isinstance(m, norm_types) else decay).append(p)
    groups = [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    return torch.optim.SGD(groups, lr=lr, momentum=momentum)


def ssl_step(online: OnlineBranch, target: TargetBranch, v1, v2,
             optimizer: torch.optim.Optimizer, tau: float,
             loss_variant: str = "paper",
             batch_id: str = "") -> LossValue:
    """One training step: gradient update of the online branch on the
    alignment loss, then the moving-average update of the target encoder
    from the post-step online encoder.

    The returned loss is the pre-update loss. Branches are updated in
    place. Non-finite losses or gradients abort the step.
    """
    p1, p2, y2_target = forward_views(online, target, v1, v2)
    if loss_variant == "byol_symmetric":
        with torch.no_grad():
            dtype = next(target.encoder.parameters()).dtype
            y1_target = target.encoder(_to_tensor(v1, dtype)).detach()
        l1_t, l2_t = _loss_terms(p1, p2, y2_target, y1_target, variant=loss_variant)
    else:
        l1_t, l2_t = _loss_terms(p1, p2, y2_target, variant=loss_variant)
    loss_t = l1_t + l2_t
    loss = float(loss_t.detach())
    if not math.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss} at batch {batch_id or '?'}")
    optimizer.zero_grad(set_to_none=True)
    loss_t.backward()
    for name, p in online.named_parameters():
        if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
            raise NumericalError(
                f"non-finite gradient in {name!r} at batch {batch_id or '?'}")
    optimizer.step()
    ema_update_module_(target.encoder, online.encoder, tau)
    return LossValue(total=loss, l1=float(l1_t.detach()), l2=float(l2_t.detach()))


def validate_backbone_blobs(blobs: ParameterSet, backbone: nn.Module) -> None:
    expected = {name: tuple(t.shape) for name, t in backbone.state_dict().items()}
    provided = {name: tuple(a.shape) for name, a in blobs.blobs.items()}
    missing = sorted(set(expected) - set(provided))
    unexpected = sorted(set(provided) - set(expected))
    if missing or unexpected:
        parts = []
        if missing:
            parts.append(f"missing blobs: {missing[:5]}")
        if unexpected:
            parts.append(f"unexpected blobs: {unexpected[:5]}")
        raise CheckpointError("backbone weights do not match architecture; "
                              + "; ".join(parts))
    for name in expected:
        if expected[name] != provided[name]:
            raise CheckpointError(
                f"backbone blob {name!r} has shape {provided[name]}, "
                f"expected {expected[name]}")


def init_from_transfer(config: TrainConfig,
                       backbone_weights=None) -> tuple[OnlineBranch, TargetBranch]:
    """Build the two branches.

    `backbone_weights` may be a checkpoint envelope with stage
    "external_backbone", a bare ParameterSet of backbone blobs, or None for
    fresh random initialization. The projector and predictor are always
    freshly initialized; the target encoder starts as an exact copy of the
    online encoder.
    """
    with seeding.torch_seeded(seeding.derive_seed(config.seed, seeding.INIT_BACKBONE)):
        backbone, feature_dim = backbones.make_backbone(config.backbone)
    with seeding.torch_seeded(seeding.derive_seed(config.seed, seeding.INIT_PROJECTOR)):
        encoder = Encoder(backbone, feature_dim, config.mlp_hidden,
                          config.projection_size)
    with seeding.torch_seeded(seeding.derive_seed(config.seed, seeding.INIT_PREDICTOR)):
        online = OnlineBranch(encoder, config.mlp_hidden)

    if backbone_weights is not None:
        stage = getattr(backbone_weights, "stage", None)
        blobs = getattr(backbone_weights, "blobs", backbone_weights)
        if stage is not None and stage != "external_backbone":
            raise CheckpointError(
                f"expected an external_backbone checkpoint, got stage {stage!r}")
        if not isinstance(blobs, ParameterSet):
            blobs = ParameterSet(blobs)
        validate_backbone_blobs(blobs, online.encoder.backbone)
        blobs.apply_to_module(online.encoder.backbone)

    with seeding.torch_seeded(seeding.derive_seed(config.seed, seeding.INIT_BACKBONE)):
        target_backbone, _ = backbones.make_backbone(config.backbone)
        target_encoder = Encoder(target_backbone, feature_dim, config.mlp_hidden,
                                 config.projection_size)
    target_encoder.load_state_dict(online.encoder.state_dict())
    target = TargetBranch(target_encoder)
    return online, target
