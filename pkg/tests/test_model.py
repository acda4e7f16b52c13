import numpy as np
import pytest

from _helpers import model_fd_grads, numpy_mlp, rel_error
from gmdlearn.cases import ModalityCase, enumerate_cases
from gmdlearn.model import (
    ModelSpec,
    cross_entropy,
    dumps_models,
    encoder_id,
    forward_case,
    grad_case,
    init_model,
    loads_models,
    mse,
    predict,
)
from gmdlearn.autodiff import Tensor

SPEC = ModelSpec((3, 2, 4), 5, ((5, "tanh"),), ((4, "relu"),), ((3, "identity"),))


def batch(spec=SPEC, n=6, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.standard_normal((n, d)) for d in spec.modality_dims], rng.integers(0, spec.output_dim, n)


def arrays(group):
    return {n: t.data for n, t in group.tensors.items()}


def test_forward_matches_numpy_oracle():
    model = init_model(SPEC, 0)
    inputs, _ = batch()
    for case in enumerate_cases(3):
        hs = [
            numpy_mlp(numpy_mlp(inputs[i], arrays(model.params[encoder_id(i)]), SPEC.encoder),
                      arrays(model.params["shared"]), SPEC.backbone)
            for i in case.members
        ]
        want = numpy_mlp(np.mean(hs, axis=0), arrays(model.params["head"]), SPEC.head)
        np.testing.assert_allclose(predict(model, inputs, case), want, rtol=1e-12, atol=1e-14)


def test_sum_fusion():
    spec = ModelSpec((2, 2), 3, ((3, "relu"),), ((3, "identity"),), ((1, "identity"),), "sum")
    model = init_model(spec, 1)
    inputs, _ = batch(spec)
    full = forward_case(model, inputs, ModalityCase.full(2))[1].values.data
    parts = [forward_case(model, inputs, ModalityCase.from_members([i], 2))[1].values.data for i in range(2)]
    np.testing.assert_allclose(full, parts[0] + parts[1], rtol=1e-14)


@pytest.mark.parametrize("loss", ["cross_entropy", "mse"])
@pytest.mark.parametrize("members", [(0,), (2,), (0, 1), (0, 1, 2)])
def test_gradients_match_finite_differences(loss, members):
    model = init_model(SPEC, 2)
    inputs, labels = batch()
    targets = labels if loss == "cross_entropy" else np.random.default_rng(1).standard_normal((6, 3))
    case = ModalityCase.from_members(members, 3)
    analytic = grad_case(model, inputs, targets, case, loss).grads
    numeric = model_fd_grads(model, inputs, targets, case, loss)
    for gid in model.params:
        assert rel_error(analytic[gid].values, numeric[gid]) <= 1e-6, gid


def test_absent_modalities_are_switched_off():
    model = init_model(SPEC, 3)
    inputs, labels = batch()
    case = ModalityCase.from_members([0, 2], 3)
    ref = grad_case(model, inputs, labels, case)
    noisy = list(inputs)
    noisy[1] = np.full_like(inputs[1], 1e6)
    out = grad_case(model, noisy, labels, case)
    none = list(inputs)
    none[1] = None
    assert predict(model, none, case).tobytes() == predict(model, inputs, case).tobytes()
    assert not ref.grads[encoder_id(1)].values.any()
    for gid in model.params:
        assert out.grads[gid].values.tobytes() == ref.grads[gid].values.tobytes()


def test_forward_errors():
    model = init_model(SPEC, 0)
    inputs, _ = batch()
    with pytest.raises(ValueError):
        forward_case(model, [inputs[0], None, inputs[2]], ModalityCase.full(3))
    with pytest.raises(ValueError):
        forward_case(model, [inputs[0], inputs[1], np.zeros((6, 9))], ModalityCase.full(3))
    with pytest.raises(ValueError):
        forward_case(model, [inputs[0], inputs[1][:3], inputs[2]], ModalityCase.full(3))
    with pytest.raises(ValueError):
        forward_case(model, inputs, ModalityCase.full(2))


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(modality_dims=()),
        dict(modality_dims=(2,), hidden_dim=4),  # encoder ends at 16
        dict(modality_dims=(2,), fusion="max"),
        dict(modality_dims=(2,), backbone=()),
        dict(modality_dims=(2,), head=((0, "identity"),)),
    ],
)
def test_spec_validation(kwargs):
    with pytest.raises(ValueError):
        ModelSpec(**kwargs)


def test_losses_against_numpy():
    logits = np.array([[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]])
    labels = np.array([1, 2])
    lse = np.log(np.exp(logits).sum(axis=1))
    want = np.mean(lse - logits[[0, 1], labels])
    assert cross_entropy(Tensor(logits), labels).item() == pytest.approx(want, rel=1e-14)
    assert mse(Tensor(logits[:, :1]), np.array([0.0, 1.0])).item() == pytest.approx((1 + 1) / 2)
    with pytest.raises(ValueError):
        cross_entropy(Tensor(logits), np.array([0, 3]))
    with pytest.raises(ValueError):
        mse(Tensor(logits), np.zeros(5))


def test_init_is_seeded():
    a, b, c = init_model(SPEC, 4), init_model(SPEC, 4), init_model(SPEC, 5)
    assert dumps_models({0: a}) == dumps_models({0: b}) != dumps_models({0: c})


def test_serialization_round_trip():
    models = {3: init_model(SPEC, 3), 1: init_model(SPEC, 1)}
    blob = dumps_models(models)
    back = loads_models(blob)
    assert sorted(back) == [1, 3]
    for seed, m in models.items():
        assert back[seed].spec == m.spec
        for gid in m.params:
            assert back[seed].params[gid].flatten().tobytes() == m.params[gid].flatten().tobytes()
    assert dumps_models(back) == blob
    with pytest.raises(ValueError):
        loads_models(b"not a model")
