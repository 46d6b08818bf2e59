import pytest
import torch
import torch.nn.functional as F
from hypothesis import HealthCheck, given, settings, strategies as st

from advcl_toolkit.attacks import (adv_ce, adv_view_3view, adv_view_paired, adv_view_single, attack_bn_mode,
                                   contrastive_view_loss, eval_attack, pgd, perturb, trades_attack)
from advcl_toolkit.data_pipeline import LabeledBatch
from advcl_toolkit.exceptions import AttackError, ValidationError
from advcl_toolkit.models import BNRoute, PerturbBudget
from advcl_toolkit.network import RobustModel

EPS = 0.1


def interior_batch(seed, n=4, labels=None):
    g = torch.Generator().manual_seed(seed)
    x = 0.25 + 0.5 * torch.rand(n, 1, 4, 4, generator=g)
    y = torch.zeros(n, dtype=torch.long) if labels is None else torch.as_tensor(labels)
    return LabeledBatch(x, y)


def random_w(seed):
    return torch.randn(16, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def bn_state(model):
    return {k: v.clone() for k, v in model.state_dict().items() if "running" in k}


def test_zero_epsilon_returns_zeros_without_drawing():
    x = torch.rand(2, 1, 4, 4)
    g = torch.Generator().manual_seed(0)
    state = g.get_state()
    delta = pgd(lambda d: d.sum(), x, PerturbBudget(epsilon=0, steps=5, step_size=0.01), g)
    assert torch.equal(delta, torch.zeros_like(x))
    assert torch.equal(g.get_state(), state)


def test_no_steps_with_zero_init_returns_zeros():
    x = torch.rand(2, 1, 4, 4)
    delta = pgd(lambda d: d.sum(), x, PerturbBudget(epsilon=EPS, steps=0, init="zero"))
    assert torch.equal(delta, torch.zeros_like(x))


def test_no_steps_with_random_init_stays_in_ball():
    x = torch.rand(2, 1, 4, 4, generator=torch.Generator().manual_seed(1))
    delta = pgd(lambda d: d.sum(), x, PerturbBudget(epsilon=EPS, steps=0), torch.Generator().manual_seed(2))
    assert delta.abs().max() <= EPS + 1e-7
    assert delta.abs().max() > 0


@pytest.mark.parametrize("label,sign", [(0, 1.0), (1, -1.0)])
def test_single_step_is_fgsm_on_linear_model(linear_classifier, label, sign):
    w = random_w(0)
    model = linear_classifier(w)
    batch = interior_batch(1, labels=[label] * 4)
    delta = eval_attack(model, batch, PerturbBudget(epsilon=EPS, steps=1, step_size=EPS, init="zero"))
    expected = sign * EPS * torch.sign(w).float().reshape(1, 1, 4, 4).expand_as(delta)
    assert torch.allclose(delta, expected, atol=1e-7)


def test_multi_step_reaches_ball_corner_on_linear_model(linear_classifier):
    w = random_w(3)
    batch = interior_batch(2)
    delta = eval_attack(linear_classifier(w), batch, PerturbBudget(epsilon=EPS, steps=10, step_size=EPS / 4,
                                                                   init="zero"))
    assert torch.allclose(delta, EPS * torch.sign(w).float().reshape(1, 1, 4, 4).expand_as(delta), atol=1e-6)


def test_linear_margin_matches_closed_form(linear_classifier):
    w = random_w(4)
    model = linear_classifier(w, b=0.0)
    batch = interior_batch(5, n=8, labels=[1] * 8)
    delta = eval_attack(model, batch, PerturbBudget(epsilon=EPS, steps=1, step_size=EPS, init="zero"))
    with torch.no_grad():
        clean = model.margin(batch.images)
        adv = model.margin(batch.images + delta)
    assert torch.allclose(adv, clean - EPS * w.abs().sum(), atol=1e-5)
    flips = (adv < 0) == (clean < EPS * w.abs().sum())
    assert flips.all()


@settings(max_examples=30, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(seed=st.integers(0, 2 ** 16), eps=st.sampled_from([1 / 255, 8 / 255, 0.1, 0.5]),
       steps=st.integers(0, 6), edge=st.booleans())
def test_projection_invariants(linear_classifier, seed, eps, steps, edge):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(3, 1, 4, 4, generator=g)
    if edge:
        x = (x > 0.5).float()
    batch = LabeledBatch(x, torch.randint(2, (3,), generator=g))
    budget = PerturbBudget(epsilon=eps, steps=steps, step_size=eps / 2)
    delta = eval_attack(linear_classifier(random_w(seed)), batch, budget, torch.Generator().manual_seed(seed))
    assert delta.abs().max() <= eps + 1e-6
    assert (x + delta).min() >= -1e-6 and (x + delta).max() <= 1 + 1e-6


def test_constant_model_leaves_zero_init_untouched(constant_classifier):
    model = constant_classifier([0.3, -0.2])
    batch = interior_batch(6, labels=[0, 1, 0, 1])
    delta = eval_attack(model, batch, PerturbBudget(epsilon=EPS, steps=5, step_size=EPS / 2, init="zero"))
    assert torch.equal(delta, torch.zeros_like(batch.images))


def test_trades_attack_moves_from_random_start(linear_classifier):
    model = linear_classifier(random_w(7))
    x = interior_batch(8).images
    moved = trades_attack(model, x, PerturbBudget(epsilon=EPS, steps=3, step_size=EPS / 2),
                          torch.Generator().manual_seed(0))
    assert moved.abs().max() > 0
    assert moved.abs().max() <= EPS + 1e-7


def test_non_finite_gradient_raises():
    x = torch.rand(2, 1, 4, 4)
    with pytest.raises(AttackError):
        pgd(lambda d: (d * float("nan")).sum(), x, PerturbBudget(epsilon=EPS, steps=2, step_size=0.01))


def test_attack_bn_mode_rejects_unknown(tiny_model):
    with pytest.raises(ValidationError):
        with attack_bn_mode(tiny_model, "frozen"):
            pass


def test_contrastive_attacks_respect_budget_and_bn_state(tiny_model):
    tiny_model.train()
    g = torch.Generator().manual_seed(0)
    x = torch.rand(4, 1, 16, 16, generator=g)
    t1x, t2x = x.flip(-1), x.roll(1, dims=-1)
    budget = PerturbBudget(epsilon=EPS, steps=2, step_size=EPS / 2)
    before = bn_state(tiny_model)

    d3 = adv_view_3view(tiny_model, x, t1x, t2x, budget, generator=g)
    d1 = adv_view_single(tiny_model, t1x, t2x, budget, generator=g)
    p1, p2 = adv_view_paired(tiny_model, t1x, t2x, budget, generator=g)

    for delta in (d3, d1, p1, p2):
        assert delta.shape == x.shape
        assert delta.abs().max() <= EPS + 1e-6
    assert (x + d3).min() >= -1e-6 and (x + d3).max() <= 1 + 1e-6
    assert tiny_model.training
    after = bn_state(tiny_model)
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_paired_views_must_share_shape(tiny_model):
    with pytest.raises(ValidationError):
        adv_view_paired(tiny_model, torch.rand(2, 1, 16, 16), torch.rand(3, 1, 16, 16), PerturbBudget())


def test_pseudo_label_attack(encoder_cfg):
    torch.manual_seed(0)
    model = RobustModel(encoder_cfg, pseudo_head_sizes=[2, 3])
    x = torch.rand(4, 1, 16, 16, generator=torch.Generator().manual_seed(1))
    labels = [torch.tensor([0, 1, 0, 1]), torch.tensor([2, 0, 1, 2])]
    budget = PerturbBudget(epsilon=EPS, steps=2, step_size=EPS / 2)
    delta = adv_ce(model, x, labels, budget, head_indices=[0, 1], generator=torch.Generator().manual_seed(2))
    assert delta.abs().max() <= EPS + 1e-6
    with pytest.raises(ValidationError):
        adv_ce(model, x, labels, budget, head_indices=[0, 2])
    with pytest.raises(ValidationError):
        adv_ce(model, x, [torch.tensor([0, 1, 0, 5]), labels[1]], budget, head_indices=[0, 1])


# --- attack strength ---

ORACLE_BUDGET = PerturbBudget(epsilon=8 / 255, steps=10, step_size=2 / 255, init="zero")
SWEEP_EPS = [2 / 255, 4 / 255, 8 / 255, 16 / 255]


def contrastive_trial(seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(4, 1, 16, 16, generator=g)
    return x, x.flip(-1), x.roll(2, dims=-1), g


def uniform_noise(shape, eps, g):
    return (2 * torch.rand(shape, generator=g) - 1) * eps


def three_view_loss(model, x, t1x, t2x, delta):
    with torch.no_grad():
        return contrastive_view_loss(model, [t1x, t2x, perturb(x, delta)],
                                     [BNRoute.NORMAL, BNRoute.NORMAL, BNRoute.ADV_CL]).item()


def paired_loss(model, t1x, t2x, d1, d2):
    with torch.no_grad():
        return contrastive_view_loss(model, [perturb(t1x, d1), perturb(t2x, d2)],
                                     [BNRoute.ADV_CL, BNRoute.ADV_CL]).item()


def test_contrastive_attacks_beat_random_noise(tiny_model):
    tiny_model.eval()
    wins_3view = wins_paired = 0
    for trial in range(20):
        x, t1x, t2x, g = contrastive_trial(trial)
        d3 = adv_view_3view(tiny_model, x, t1x, t2x, ORACLE_BUDGET)
        noise = uniform_noise(x.shape, ORACLE_BUDGET.epsilon, g)
        wins_3view += three_view_loss(tiny_model, x, t1x, t2x, d3) > three_view_loss(tiny_model, x, t1x, t2x, noise)

        p1, p2 = adv_view_paired(tiny_model, t1x, t2x, ORACLE_BUDGET)
        n1, n2 = (uniform_noise(x.shape, ORACLE_BUDGET.epsilon, g) for _ in range(2))
        wins_paired += paired_loss(tiny_model, t1x, t2x, p1, p2) > paired_loss(tiny_model, t1x, t2x, n1, n2)
    assert wins_3view >= 18
    assert wins_paired >= 18


def test_eval_attack_loss_grows_with_epsilon(linear_classifier):
    model = linear_classifier(random_w(7))
    batch = interior_batch(8, n=8)
    losses = []
    for eps in SWEEP_EPS:
        budget = PerturbBudget(epsilon=eps, steps=10, step_size=eps / 4, init="zero")
        delta = eval_attack(model, batch, budget)
        with torch.no_grad():
            losses.append(F.cross_entropy(model.forward_classifier(batch.images + delta), batch.labels).item())
    assert all(b > a for a, b in zip(losses, losses[1:]))


def test_three_view_attack_loss_grows_with_epsilon(tiny_model):
    tiny_model.eval()
    x, t1x, t2x, _ = contrastive_trial(99)
    losses = []
    for eps in SWEEP_EPS:
        delta = adv_view_3view(tiny_model, x, t1x, t2x, PerturbBudget(epsilon=eps, steps=10, step_size=eps / 4,
                                                                      init="zero"))
        losses.append(three_view_loss(tiny_model, x, t1x, t2x, delta))
    assert all(b >= a - 1e-4 for a, b in zip(losses, losses[1:]))
