import logging
import math
import time

import numpy as np
import pytest
import torch

from streamsched.agent import ADOPTION, ENGAGEMENT, Transition
from streamsched.events import DomainError
from streamsched.features import history_window
from streamsched.learner import (
    BatchLosses, LearnerConfig, MultiTaskAgent, NumericError, Optimizers, apply_updates, compute_losses,
    discounted_targets, learner_loss, load_checkpoint, policy_loss, q_value, read_curves, save_checkpoint,
    train, write_curves,
)
from streamsched.nn import MLP, grad_check
from streamsched.nn._init import DTYPE

FEATURES, SLOTS = 5, 6


def small_config(**kw):
    base = dict(state_dim=8, window=3, buffer_size=4, actor_hidden=6, critic_hidden=6, model_dim=4,
                gtrxl_heads=2, importance_hidden=4, lr=0.01)
    base.update(kw)
    return LearnerConfig(**base)


def random_batches(config, seed=0, slots=SLOTS):
    rng = np.random.default_rng(seed)
    out = {}
    for task in config.task_list:
        batch = []
        for k in range(config.buffer_size):
            probs = rng.dirichlet(np.ones(slots))
            batch.append(Transition(
                task, rng.normal(size=(config.window, FEATURES)), rng.uniform(0, 3, config.window),
                int(rng.integers(slots)), probs, float(rng.uniform(0, 2)), 0.5,
                rng.normal(size=(config.window, FEATURES)), rng.uniform(0, 3, config.window),
                episode=k // 3, seq=k,
            ))
        out[task] = batch
    return out


def snapshot(agent):
    return {name: [p.detach().clone() for p in params] for name, params in agent.groups().items()}


def same(a, b):
    return all(torch.equal(x, y) for x, y in zip(a, b))


# --- Q ------------------------------------------------------------------------

def test_q_zero_weights():
    critic = MLP([4 + 3, 5, 1], ["relu", "identity"])
    with torch.no_grad():
        for p in critic.parameters():
            p.zero_()
    s, a = torch.randn(4, dtype=DTYPE), torch.tensor([0.2, 0.3, 0.5], dtype=DTYPE)
    assert q_value(s, a, critic).item() == 0.0


def test_q_shape_mismatch():
    critic = MLP([7, 5, 1], ["relu", "identity"])
    with pytest.raises(DomainError):
        q_value(torch.zeros(4, dtype=DTYPE), torch.zeros(4, dtype=DTYPE), critic)


def test_q_order_of_concatenation_matters():
    critic = MLP([6, 5, 1], ["relu", "identity"], seed=3)
    s = torch.randn(3, dtype=DTYPE, generator=torch.Generator().manual_seed(0))
    a = torch.tensor([0.1, 0.6, 0.3], dtype=DTYPE)
    assert q_value(s, a, critic).item() != q_value(a, s, critic).item()


@pytest.mark.parametrize("seed", range(3))
def test_q_gradients(seed):
    critic = MLP([6, 5, 1], ["relu", "identity"], seed=seed)
    x = torch.randn(4, 6, dtype=DTYPE, generator=torch.Generator().manual_seed(seed))
    report = grad_check(lambda: q_value(x[:, :3], x[:, 3:], critic).sum(), list(critic.parameters()),
                        probe_count=25, seed=seed)
    assert report.passed, report.failures


# --- losses ---------------------------------------------------------------------

def test_policy_loss_hand_case():
    loss = policy_loss(torch.log(torch.tensor([[0.5]], dtype=DTYPE)), torch.tensor([[1.0]], dtype=DTYPE))
    assert loss.item() == pytest.approx(math.log(2), abs=1e-15)
    assert loss.item() == pytest.approx(0.6931, abs=1e-4)


def test_policy_loss_zero_advantage():
    lp = torch.log(torch.tensor([[0.1, 0.7], [0.3, 0.2]], dtype=DTYPE))
    assert policy_loss(lp, torch.zeros(2, 2, dtype=DTYPE)).item() == 0.0


def test_policy_loss_holds_advantage_constant():
    lp = torch.tensor([[-1.0]], dtype=DTYPE, requires_grad=True)
    adv = torch.tensor([[2.0]], dtype=DTYPE, requires_grad=True)
    policy_loss(lp, adv).backward()
    assert adv.grad is None and lp.grad.item() == -2.0


def test_learner_loss_hand_case():
    one = torch.ones(1, 1, dtype=DTYPE)
    assert learner_loss(one, one * 0.5, one).item() == 0.25


def test_learner_loss_perfect_fit():
    r = torch.tensor([[0.3, 1.2]], dtype=DTYPE)
    assert learner_loss(r, torch.full_like(r, 0.5), 2 * r).item() == 0.0


def test_learner_loss_rejects_non_finite_reward():
    r = torch.tensor([[math.inf]], dtype=DTYPE)
    with pytest.raises(DomainError):
        learner_loss(r, torch.ones_like(r), torch.ones_like(r))


def test_discounted_targets_reset_at_episode_boundary():
    rng = np.random.default_rng(0)
    mk = lambda r, ep: Transition(ENGAGEMENT, rng.normal(size=(2, 1)), np.zeros(2), 0, np.array([1.0]),  # noqa: E731
                                  r, 1.0, rng.normal(size=(2, 1)), np.zeros(2), episode=ep)
    batch = [mk(1.0, 0), mk(2.0, 0), mk(4.0, 1)]
    assert list(discounted_targets(batch, 0.5)) == [2.0, 2.0, 4.0]


# --- gradients of the joint losses ----------------------------------------------

def losses_fn(agent, batches, which):
    return lambda: getattr(compute_losses(agent, batches), which)


@pytest.mark.parametrize("seed", range(3))
def test_policy_gradient_wrt_actor(seed):
    config = small_config(seed=seed)
    agent = MultiTaskAgent(config, FEATURES, SLOTS)
    batches = random_batches(config, seed)
    advantage = compute_losses(agent, batches).advantage

    def frozen_bracket():
        rows = []
        for task in config.task_list:
            b = batches[task]
            s = agent.encoder(torch.from_numpy(np.stack([t.features for t in b])),
                              torch.from_numpy(np.stack([t.deltas for t in b])))
            probs = torch.softmax(agent.actor_for(task).logits(s), dim=-1)
            rows.append(torch.log(probs[torch.arange(len(b)), [t.action for t in b]]))
        return policy_loss(torch.stack(rows), advantage)

    assert frozen_bracket().item() == pytest.approx(compute_losses(agent, batches).policy.item(), abs=1e-14)
    report = grad_check(frozen_bracket, agent.groups()["theta"], probe_count=30, seed=seed)
    assert report.passed, report.failures


@pytest.mark.parametrize("group", ["zeta", "omega", "eta"])
def test_learner_gradients(group):
    config = small_config(seed=1)
    agent = MultiTaskAgent(config, FEATURES, SLOTS)
    batches = random_batches(config, 1)
    report = grad_check(losses_fn(agent, batches, "learner"), agent.groups()[group], probe_count=30,
                        tolerance=1e-3)
    assert report.passed, report.failures


def test_learner_loss_does_not_reach_encoder():
    config = small_config()
    agent = MultiTaskAgent(config, FEATURES, SLOTS)
    out = compute_losses(agent, random_batches(config))
    grads = torch.autograd.grad(out.learner, agent.groups()["w"] + agent.groups()["theta"], allow_unused=True)
    assert all(g is None for g in grads)


def test_weights_rows_sum_to_one():
    config = small_config()
    agent = MultiTaskAgent(config, FEATURES, SLOTS)
    w = compute_losses(agent, random_batches(config)).weights
    assert w.shape == (2, config.buffer_size)
    assert torch.allclose(w.sum(0), torch.ones(config.buffer_size, dtype=DTYPE), atol=1e-12)


# --- updates -----------------------------------------------------------------------

def test_routing_is_exact():
    config = small_config()
    agent = MultiTaskAgent(config, FEATURES, SLOTS)
    opts = Optimizers(agent, config.lr)
    batches = random_batches(config)

    before = snapshot(agent)
    apply_updates(compute_losses(agent, batches), opts, routes=("policy",))
    after = snapshot(agent)
    for name in ("eta", "omega", "zeta"):
        assert same(before[name], after[name]), name
    for name in ("w", "theta"):
        assert not same(before[name], after[name]), name

    apply_updates(compute_losses(agent, batches), opts, routes=("learner",))
    final = snapshot(agent)
    for name in ("w", "theta"):
        assert same(after[name], final[name]), name
    for name in ("eta", "omega", "zeta"):
        assert not same(after[name], final[name]), name


def test_unknown_route():
    config = small_config()
    agent = MultiTaskAgent(config, FEATURES, SLOTS)
    with pytest.raises(DomainError):
        apply_updates(compute_losses(agent, random_batches(config)), Optimizers(agent, 0.1), routes=("critic",))


def fake_losses(policy, learner):
    one = torch.ones(1, 1, dtype=DTYPE)
    return BatchLosses(policy, learner, one, one, 0)


def test_zero_gradients_leave_params_unchanged():
    agent = MultiTaskAgent(small_config(), FEATURES, SLOTS)
    opts = Optimizers(agent, 0.1)
    before = snapshot(agent)
    for _ in range(3):
        zero_p = sum((p * 0).sum() for p in opts.policy_params)
        zero_l = sum((p * 0).sum() for p in opts.learner_params)
        apply_updates(fake_losses(zero_p, zero_l), opts)
    after = snapshot(agent)
    assert all(same(before[k], after[k]) for k in before)


def scalar_adam(p, g, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    trace = []
    for t in range(1, steps + 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        trace.append(p)
    return trace


@pytest.mark.parametrize("route", ["policy", "learner"])
def test_adam_matches_scalar_trace(route):
    agent = MultiTaskAgent(small_config(), FEATURES, SLOTS)
    opts = Optimizers(agent, 0.05)
    param = (opts.policy_params if route == "policy" else opts.learner_params)[0]
    start, g = param.flatten()[0].item(), -0.37
    got = []
    for _ in range(20):
        loss = g * param.flatten()[0]
        zero = sum((p * 0).sum() for p in (opts.learner_params if route == "policy" else opts.policy_params))
        apply_updates(fake_losses(loss, zero) if route == "policy" else fake_losses(zero, loss), opts)
        got.append(param.flatten()[0].item())
    assert np.allclose(got, scalar_adam(start, g, 0.05, 20), atol=1e-12, rtol=0)


def test_non_finite_loss_aborts_without_update():
    agent = MultiTaskAgent(small_config(), FEATURES, SLOTS)
    opts = Optimizers(agent, 0.1)
    before = snapshot(agent)
    ok = sum(p.sum() for p in opts.policy_params)
    with pytest.raises(NumericError, match="learner"):
        apply_updates(fake_losses(ok, torch.tensor(math.nan, dtype=DTYPE)), opts)
    with pytest.raises(NumericError, match="gradient"):
        bad = torch.sqrt(opts.learner_params[0].flatten()[0] * 0)
        apply_updates(fake_losses(ok, bad), opts)
    after = snapshot(agent)
    assert all(same(before[k], after[k]) for k in before)


def test_update_is_deterministic():
    config = small_config()
    batches = random_batches(config)
    results = []
    for _ in range(2):
        agent = MultiTaskAgent(config, FEATURES, SLOTS)
        opts = Optimizers(agent, config.lr)
        for _ in range(2):
            apply_updates(compute_losses(agent, batches), opts)
        results.append(snapshot(agent))
    assert all(same(results[0][k], results[1][k]) for k in results[0])


# --- config ------------------------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(lr=0.0), dict(epsilon=1.5), dict(gamma=-0.1), dict(tasks="all"),
                                dict(buffer_size=0), dict(q_action="sample")])
def test_config_validation(kw):
    with pytest.raises(DomainError):
        LearnerConfig(**kw).validate()


def test_defaults():
    c = LearnerConfig()
    assert (c.lr, c.gamma, c.epsilon, c.buffer_size, c.episodes, c.horizon) == (0.001, 0.92, 0.1, 128, 300, 200)


# --- training ------------------------------------------------------------------------

def tiny(**kw):
    base = dict(episodes=3, horizon=10, buffer_size=5, state_dim=8, window=5, actor_hidden=8, critic_hidden=8,
                model_dim=4, importance_hidden=4, lr=0.01, seed=0)
    base.update(kw)
    return LearnerConfig(**base)


def test_tiny_run_smoke(degenerate_env):
    train_log, _, model = degenerate_env
    t0 = time.perf_counter()
    result = train(tiny(), model, train_log)
    assert time.perf_counter() - t0 < 10
    assert len(result.curves) == 3 * 2
    assert all(math.isfinite(v) for row in result.curves for k, v in row.items() if k not in ("episode", "task"))
    assert len(result.update_losses) == 6


def test_window_must_match_emulator(degenerate_env):
    train_log, _, model = degenerate_env
    with pytest.raises(DomainError):
        train(tiny(window=4), model, train_log)


def test_training_reproducible(degenerate_env):
    train_log, _, model = degenerate_env
    a, b = train(tiny(), model, train_log), train(tiny(), model, train_log)
    assert a.curves == b.curves
    sa, sb = snapshot(a.agent), snapshot(b.agent)
    assert all(same(sa[k], sb[k]) for k in sa)


def test_single_task_weights_are_ones(degenerate_env):
    train_log, _, model = degenerate_env
    seen = []
    train(tiny(tasks="engagement-only"), model, train_log, on_update=lambda agent, losses: seen.append(losses.weights))
    assert seen and all(torch.equal(w, torch.ones_like(w)) for w in seen)


def test_adoption_only_trains_on_adoption(degenerate_env):
    train_log, _, model = degenerate_env
    result = train(tiny(tasks="adoption-only", episodes=1), model, train_log)
    assert [r["task"] for r in result.curves] == [ADOPTION]


def test_per_task_heads(degenerate_env):
    train_log, test_log, model = degenerate_env
    result = train(tiny(actor_mode="per_task_heads"), model, train_log)
    assert len(result.agent.actors) == 2
    probs = result.action_probs(history_window(test_log, 3, 5))
    assert abs(probs.sum() - 1) < 1e-12


@pytest.mark.parametrize("seed", [0, 1])
def test_degenerate_env_finds_best_slot(degenerate_env, seed):
    # engagement defines the best slot here; adoption carries no slot signal in this env
    train_log, test_log, model = degenerate_env
    config = LearnerConfig(episodes=40, horizon=20, window=5, state_dim=16, buffer_size=16, lr=0.01,
                           epsilon=0.9, tasks="engagement-only", seed=seed)
    result = train(config, model, train_log)
    picks = [int(np.argmax(result.action_probs(history_window(test_log, i, 5)))) for i in range(len(test_log))]
    assert np.mean(np.array(picks) == 9) >= 0.9


def test_floor_hits_are_logged(degenerate_env, caplog, monkeypatch):
    import streamsched.learner as learner

    monkeypatch.setattr(learner, "PROB_FLOOR", 1.0)
    train_log, _, model = degenerate_env
    with caplog.at_level(logging.WARNING, logger="streamsched.learner"):
        train(tiny(episodes=1), model, train_log)
    assert "probability floor" in caplog.text


# --- persistence -------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, degenerate_env):
    train_log, test_log, model = degenerate_env
    result = train(tiny(), model, train_log)
    save_checkpoint(result, tmp_path / "agent.bin")
    back = load_checkpoint(tmp_path / "agent.bin")
    assert back.config == result.config
    sa, sb = snapshot(result.agent), snapshot(back.agent)
    assert all(same(sa[k], sb[k]) for k in sa)
    window = history_window(test_log, 4, 5)
    assert np.array_equal(back.action_probs(window), result.action_probs(window))

    # restored optimizer moments give the same next step
    feats = model.stats.feature_dim
    batches = {
        task: [Transition(task, np.ones((5, feats)) * k, np.ones(5), k % 24, np.full(24, 1 / 24), 0.3 * k, 0.5,
                          np.ones((5, feats)), np.ones(5), seq=k) for k in range(5)]
        for task in result.config.task_list
    }
    for trained in (result, back):
        apply_updates(compute_losses(trained.agent, batches), trained.optimizers)
    sa, sb = snapshot(result.agent), snapshot(back.agent)
    assert all(same(sa[k], sb[k]) for k in sa)


def test_load_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"garbage" * 4)
    with pytest.raises(DomainError):
        load_checkpoint(p)


def test_curves_round_trip(tmp_path, degenerate_env):
    train_log, _, model = degenerate_env
    curves = train(tiny(), model, train_log).curves
    write_curves(tmp_path / "c.csv", curves)
    assert read_curves(tmp_path / "c.csv") == curves

