"""Dynamic Sharing model: per-modality encoders, one shared backbone applied to
each present modality separately, fusion after the backbone, and a task head.

Absent modalities are skipped entirely; their inputs are never read and their
encoders receive exact zero gradients.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .autodiff import (
    ACTIVATIONS,
    GradientVector,
    Layer,
    ParamGroup,
    Tensor,
    backward,
    forward_mlp,
    init_mlp,
    mean_of,
)
from .cases import ModalityCase

FUSIONS = ("mean", "sum")
LOSSES = ("mse", "cross_entropy")
INIT_STREAM = 0x1417


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of a DS model.

    ``encoder`` is applied to every modality and must end at ``hidden_dim``;
    ``backbone`` starts from ``hidden_dim``; ``head`` ends at the output width.
    """

    modality_dims: tuple[int, ...]
    hidden_dim: int = 16
    encoder: tuple[Layer, ...] = ((16, "relu"),)
    backbone: tuple[Layer, ...] = ((16, "relu"),)
    head: tuple[Layer, ...] = ((2, "identity"),)
    fusion: str = "mean"

    def __post_init__(self):
        norm = lambda arch: tuple((int(w), str(a)) for w, a in arch)  # noqa: E731
        object.__setattr__(self, "modality_dims", tuple(int(d) for d in self.modality_dims))
        for name in ("encoder", "backbone", "head"):
            object.__setattr__(self, name, norm(getattr(self, name)))
        if not self.modality_dims or any(d < 1 for d in self.modality_dims):
            raise ValueError(f"modality_dims must be non-empty positive widths, got {self.modality_dims}")
        for name in ("encoder", "backbone", "head"):
            arch = getattr(self, name)
            if not arch:
                raise ValueError(f"{name} needs at least one layer")
            for width, act in arch:
                if width < 1 or act not in ACTIVATIONS:
                    raise ValueError(f"{name}: bad layer ({width}, {act!r})")
        if self.encoder[-1][0] != self.hidden_dim:
            raise ValueError(
                f"encoder output width {self.encoder[-1][0]} must equal hidden_dim {self.hidden_dim}"
            )
        if self.fusion not in FUSIONS:
            raise ValueError(f"unknown fusion {self.fusion!r}; expected one of {FUSIONS}")

    @property
    def n_modalities(self) -> int:
        return len(self.modality_dims)

    @property
    def output_dim(self) -> int:
        return self.head[-1][0]

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in ("encoder", "backbone", "head"):
            d[name] = [list(layer) for layer in d[name]]
        d["modality_dims"] = list(d["modality_dims"])
        return d


def encoder_id(i: int) -> str:
    return f"encoder{i}"


@dataclass
class DsModel:
    spec: ModelSpec
    params: dict[str, ParamGroup]

    @property
    def n_modalities(self) -> int:
        return self.spec.n_modalities

    @property
    def groups(self) -> list[ParamGroup]:
        return list(self.params.values())

    @property
    def n_parameters(self) -> int:
        return sum(g.size for g in self.params.values())

    def with_flat(self, flat: Mapping[str, np.ndarray]) -> DsModel:
        """Copy with the given groups replaced by flat parameter vectors."""
        params = {gid: (g.with_values(flat[gid]) if gid in flat else g) for gid, g in self.params.items()}
        return DsModel(self.spec, params)

    def flat(self) -> dict[str, np.ndarray]:
        return {gid: g.flatten() for gid, g in self.params.items()}

    def grad_case(self, inputs, targets, case, loss="cross_entropy"):
        return grad_case(self, inputs, targets, case, loss)


def init_model(spec: ModelSpec, seed: int) -> DsModel:
    rng = np.random.default_rng([seed, INIT_STREAM])
    params = {}
    for i in range(spec.n_modalities):
        params[encoder_id(i)] = init_mlp(encoder_id(i), spec.modality_dims[i], spec.encoder, rng)
    params["shared"] = init_mlp("shared", spec.hidden_dim, spec.backbone, rng)
    params["head"] = init_mlp("head", spec.backbone[-1][0], spec.head, rng)
    return DsModel(spec, params)


@dataclass(frozen=True)
class FusedRepresentation:
    values: Tensor
    case: ModalityCase


def forward_case(model: DsModel, inputs: Sequence[np.ndarray | None], case: ModalityCase):
    """Prediction and fused representation for the modalities in ``case``."""
    spec = model.spec
    if case.n_modalities != spec.n_modalities:
        raise ValueError(f"case has {case.n_modalities} modalities, model has {spec.n_modalities}")
    if len(inputs) != spec.n_modalities:
        raise ValueError(f"expected {spec.n_modalities} modality inputs, got {len(inputs)}")
    hidden = []
    batch = None
    for i in case.members:
        x = inputs[i]
        if x is None:
            raise ValueError(f"case {case} needs modality {i + 1}, which is missing from the batch")
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != spec.modality_dims[i]:
            raise ValueError(f"modality {i + 1}: expected (batch, {spec.modality_dims[i]}), got {x.shape}")
        if batch is None:
            batch = x.shape[0]
        elif x.shape[0] != batch:
            raise ValueError(f"modality {i + 1} has {x.shape[0]} rows, expected {batch}")
        z = forward_mlp(model.params[encoder_id(i)], x, spec.encoder)
        hidden.append(forward_mlp(model.params["shared"], z, spec.backbone))
    if spec.fusion == "mean":
        fused = mean_of(hidden)
    else:
        fused = hidden[0]
        for h in hidden[1:]:
            fused = fused + h
    pred = forward_mlp(model.params["head"], fused, spec.head)
    return pred, FusedRepresentation(fused, case)


def predict(model: DsModel, inputs, case: ModalityCase) -> np.ndarray:
    return np.array(forward_case(model, inputs, case)[0].data)


def mse(pred: Tensor, target) -> Tensor:
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.shape:
        if target.size == pred.data.size and pred.data.ndim == 2 and pred.shape[1] == 1:
            target = target.reshape(pred.shape)
        else:
            raise ValueError(f"target shape {target.shape} does not match prediction {pred.shape}")
    return (pred - target).square().mean()


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[1]})")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise ValueError("class labels must be integers")
        labels = labels.astype(np.intp)
    return -(logits.log_softmax().pick(labels).mean())


def loss_fn(name: str):
    if name == "mse":
        return mse
    if name == "cross_entropy":
        return cross_entropy
    raise ValueError(f"unknown loss {name!r}; expected one of {LOSSES}")


@dataclass
class CaseGradients:
    case: ModalityCase
    loss: float
    grads: dict[str, GradientVector] = field(default_factory=dict)


def grad_case(model: DsModel, inputs, targets, case: ModalityCase, loss: str = "cross_entropy") -> CaseGradients:
    """Loss of one case and the gradient of every parameter group."""
    pred, _ = forward_case(model, inputs, case)
    value = loss_fn(loss)(pred, targets)
    return CaseGradients(case, value.item(), backward(value, model.groups))


# serialization ---------------------------------------------------------------

_MAGIC = b"GMDMODEL1\n"


def dumps_models(models: Mapping[int, DsModel]) -> bytes:
    """Binary archive of models keyed by seed: JSON header then float64 payload."""
    header, chunks, offset = [], [], 0
    for seed in sorted(models):
        m = models[seed]
        groups = []
        for gid, g in m.params.items():
            flat = g.flatten()
            tensors = [{"name": n, "shape": list(s)} for n, s in g.layout]
            groups.append({"id": gid, "offset": offset, "size": int(flat.size), "tensors": tensors})
            chunks.append(flat.astype("<f8").tobytes())
            offset += int(flat.size)
        header.append({"seed": int(seed), "spec": m.spec.to_dict(), "groups": groups})
    head = json.dumps({"models": header}, sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<Q", len(head)))
    buf.write(head)
    for c in chunks:
        buf.write(c)
    return buf.getvalue()


def loads_models(blob: bytes) -> dict[int, DsModel]:
    if not blob.startswith(_MAGIC):
        raise ValueError("not a model archive")
    pos = len(_MAGIC)
    (n,) = struct.unpack("<Q", blob[pos : pos + 8])
    pos += 8
    header = json.loads(blob[pos : pos + n])
    payload = np.frombuffer(blob[pos + n :], dtype="<f8")
    out = {}
    for entry in header["models"]:
        spec = ModelSpec(**{**entry["spec"], "modality_dims": tuple(entry["spec"]["modality_dims"])})
        params = {}
        for g in entry["groups"]:
            flat = payload[g["offset"] : g["offset"] + g["size"]].astype(np.float64)
            arrays, k = {}, 0
            for t in g["tensors"]:
                size = int(np.prod(t["shape"]))
                arrays[t["name"]] = flat[k : k + size].reshape(t["shape"])
                k += size
            params[g["id"]] = ParamGroup(g["id"], arrays)
        out[int(entry["seed"])] = DsModel(spec, params)
    return out
