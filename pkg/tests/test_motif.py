import math

import pytest
import torch

from iter_sgg import criterion, dataset, detector, layers
from iter_sgg.criterion import ClassWeights, NonFiniteLossError
from iter_sgg.models import MotifConfig, MotifRefinementModel

from test_triple_decoder import randomize_conditioning


@pytest.fixture
def det(tiny_dataset):
    grid, graph = dataset.load_split(tiny_dataset, "train")[0]
    return detector.simulate_detector(grid, graph, tiny_dataset.world, detector.DetectorConfig())


def make_model(world, seed=0, **kwargs):
    torch.manual_seed(seed)
    cfg = MotifConfig(**{"d_r": 8, "n_steps": 3, "n_heads": 2, **kwargs})
    return MotifRefinementModel(detector.roi_dim(world), detector.union_dim(world), world.eta, world.upsilon, cfg)


def as_double(det):
    return type(det)(**{k: v.double() if v.is_floating_point() else v for k, v in vars(det).items()})


def test_output_shapes(tiny_dataset, det):
    world = tiny_dataset.world
    out = make_model(world)(det)
    n, p = len(det), det.pairs.shape[0]
    assert out.num_steps == 3
    assert out.entity_logits.shape == (3, n, world.eta)
    assert out.predicate_logits.shape == (3, p, world.upsilon + 1)
    assert out.labels.shape == (3, n)


def test_teacher_forcing_uses_given_labels(tiny_dataset, det):
    out = make_model(tiny_dataset.world)(det, labels=det.gt_labels)
    for t in range(3):
        assert out.labels[t].tolist() == det.gt_labels.tolist()


def test_zeroed_refinement_steps_repeat_first_step(tiny_dataset, det):
    model = make_model(tiny_dataset.world)
    with torch.no_grad():
        for step in model.steps[1:]:
            for p in step.parameters():
                p.zero_()
    out = model(det)
    for t in (1, 2):
        assert torch.equal(out.entity_logits[t], out.entity_logits[0])
        assert torch.equal(out.predicate_logits[t], out.predicate_logits[0])
        assert torch.equal(out.labels[t], out.labels[0])


def test_zeroed_cascades_equal_disabled(tiny_dataset, det):
    world = tiny_dataset.world
    enabled = make_model(world)
    with torch.no_grad():
        for name, p in enabled.named_parameters():
            if "_cond." in name:
                p.zero_()
    disabled = make_model(world, seed=4, enable_cas=False)
    shared = disabled.state_dict()
    disabled.load_state_dict({k: v for k, v in enabled.state_dict().items() if k in shared})
    a, b = enabled(det), disabled(det)
    assert torch.equal(a.entity_logits, b.entity_logits)
    assert torch.equal(a.predicate_logits, b.predicate_logits)


def test_cascades_change_later_steps(tiny_dataset, det):
    model = make_model(tiny_dataset.world)
    with torch.no_grad():
        model.steps[1].z_cond[0].ff.down_proj.weight.normal_()
    plain = make_model(tiny_dataset.world, enable_cas=False)
    plain.load_state_dict({k: v for k, v in model.state_dict().items() if k in plain.state_dict()})
    assert not torch.equal(model(det).entity_logits[1], plain(det).entity_logits[1])
    assert not hasattr(model.steps[0], "z_cond")


def test_triplets_ranking(tiny_dataset, det):
    out = make_model(tiny_dataset.world)(det)
    ranked = out.triplets(det, 2, top_m=2)
    assert len(ranked) == 2 * det.pairs.shape[0]
    scores = [t.score for t in ranked]
    assert scores == sorted(scores, reverse=True)
    assert all(t.p_class < tiny_dataset.world.upsilon for t in ranked)
    with pytest.raises(ValueError, match="out of range"):
        out.triplets(det, 4)


def test_parameter_prefix(tiny_dataset):
    model = make_model(tiny_dataset.world)
    assert model.n_params_prefix(3) == sum(p.numel() for p in model.parameters())
    assert model.n_params_prefix(1) < model.n_params_prefix(2) < model.n_params_prefix(3)


def test_motif_criterion(tiny_dataset, det):
    world = tiny_dataset.world
    model = make_model(world)
    crit = criterion.MotifCriterion(ClassWeights.uniform(world.upsilon), bg_coef=0.25)
    losses = crit([model(det, labels=det.gt_labels)], [det])
    assert losses.num_layers == 3
    assert set(x for _, x, _ in losses.terms) == {"e", "p"}
    assert torch.isfinite(losses.total)
    losses.total.backward()
    with pytest.raises(ValueError, match="bg_coef"):
        criterion.MotifCriterion(ClassWeights.uniform(world.upsilon), bg_coef=-1)


def test_motif_criterion_infinite_weight(tiny_dataset, det):
    world = tiny_dataset.world
    present = det.gt_predicates[det.gt_predicates < world.upsilon]
    if not present.numel():
        pytest.skip("scene without relations")
    w = [1.0] * world.upsilon
    w[int(present[0])] = math.inf
    crit = criterion.MotifCriterion(ClassWeights(tuple(w)))
    with pytest.raises(NonFiniteLossError):
        crit([make_model(world)(det, labels=det.gt_labels)], [det])


@pytest.mark.parametrize("kwargs", [{"n_steps": 0}, {"enable_cas": 1}, {"d_r": 9}])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        MotifConfig(**{"n_heads": 2, **kwargs})


def test_motif_gradients(tiny_dataset, det):
    world = tiny_dataset.world
    model = randomize_conditioning(make_model(world, n_steps=2, d_r=4).double())
    det = as_double(det)
    crit = criterion.MotifCriterion(ClassWeights.uniform(world.upsilon))

    def fn():
        return crit([model(det, labels=det.gt_labels)], [det]).total

    assert layers.grad_check(fn, list(model.parameters()), max_components=2) < 1e-3


def test_entity_context_reversal_swaps_directions(tiny_dataset, det):
    model = make_model(tiny_dataset.world).double()
    d = model.cfg.d_r
    z = model.roi_proj(det.roi_features.double())
    labels = det.labels.double()
    out = model.entity_context(0, z, labels)
    assert out.shape == (len(det), 2 * d)
    flipped = model.entity_context(0, z.flip(0), labels.flip(0))
    torch.testing.assert_close(flipped[:, :d], out.flip(0)[:, d:])
    torch.testing.assert_close(flipped[:, d:], out.flip(0)[:, :d])


def _sigmoid(x):
    return 1 / (1 + math.exp(-x))


def _decode_by_hand(w_ih, w_hh, embed, classifier, contexts, h_prev, labels):
    h, c = 0.0, 0.0
    prev = embed[-1]
    states, decoded = [], []
    for i, context in enumerate(contexts):
        x = [*context, prev]
        gates = [sum(w * v for w, v in zip(row, x)) + w_h * h for row, w_h in zip(w_ih, w_hh)]
        in_gate, forget_gate, cell_gate, out_gate = gates
        c = _sigmoid(forget_gate) * c + _sigmoid(in_gate) * math.tanh(cell_gate)
        h = _sigmoid(out_gate) * math.tanh(c)
        state = h_prev[i] + h
        if labels is None:
            scores = [w * state for w in classifier]
            label = max(range(len(scores)), key=lambda k: (scores[k], -k))
        else:
            label = labels[i]
        states.append(state)
        decoded.append(label)
        prev = embed[label]
    return states, decoded


@pytest.mark.parametrize("labels", [None, [1, 0]])
def test_entity_decode_matches_hand_recurrence(labels):
    model = MotifRefinementModel(3, 3, 2, 4, MotifConfig(d_r=1, n_steps=1, n_heads=1)).double()
    w_ih = [[0.5, -0.3, 0.8], [0.1, 0.2, -0.5], [-0.7, 0.4, 0.3], [0.6, 0.6, -0.2]]
    w_hh = [0.3, -0.4, 0.9, 0.2]
    embed = [0.5, -1.0, 0.25]
    classifier = [1.0, -1.0]
    cell = model.steps[0].entity_cell
    with torch.no_grad():
        cell.weight_ih.copy_(torch.tensor(w_ih))
        cell.weight_hh.copy_(torch.tensor(w_hh)[:, None])
        cell.bias_ih.zero_()
        cell.bias_hh.zero_()
        model.label_embed.weight.copy_(torch.tensor(embed)[:, None])
        model.entity_classifier.weight.copy_(torch.tensor(classifier)[:, None])
        model.entity_classifier.bias.zero_()
    contexts = [[0.2, -0.4], [1.0, 0.3]]
    h_prev = [0.1, -0.2]
    given = None if labels is None else torch.tensor(labels)
    h, decoded = model.entity_decode(
        0, torch.tensor(contexts, dtype=torch.float64), torch.tensor(h_prev, dtype=torch.float64)[:, None], given
    )
    states, expected = _decode_by_hand(w_ih, w_hh, embed, classifier, contexts, h_prev, labels)
    assert h[:, 0].tolist() == pytest.approx(states, abs=1e-12)
    assert decoded.tolist() == expected
