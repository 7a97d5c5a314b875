import json

import numpy as np
import pytest

from bmil import autodiff as ad
from bmil.demos import random_controller, run_episode
from bmil.envs import make_env
from bmil.trainer import (MODES, Agent, TrainConfig, Trainer, TrainingAborted, agent_from_checkpoint, evaluate,
                          evaluate_agent, metrics_header, train)


def tiny(mode="bmil", env="pointmass-nav", **over):
    cfg = TrainConfig()
    cfg.env.id = env
    cfg.env.demo_count = 2
    cfg.run.mode = mode
    cfg.run.total_steps = 400
    cfg.run.num_envs = 2
    cfg.net.hidden = 8
    cfg.net.enc_width = 4
    cfg.eval.interval = 200
    cfg.eval.episodes = 2
    for k, v in over.items():
        cfg.set(k, v)
    return cfg


# -- configuration -------------------------------------------------------------------


def test_keys_and_aliases():
    cfg = TrainConfig()
    assert "reg.k" in cfg.keys() and "optim.lr" in cfg.keys()
    cfg.set("k", "1,10")
    assert cfg.reg.k == (1, 10)
    cfg.set("lambda1", "0")
    assert cfg.reg.lambda1 == 0.0
    cfg.set("total_steps", "3e5")
    assert cfg.run.total_steps == 300_000
    with pytest.raises(KeyError):
        cfg.set("no_such_key", 1)


def test_defaults_follow_published_settings():
    cfg = TrainConfig()
    assert cfg.optim.lr == 3e-4 and cfg.algo.c == 5 and cfg.algo.entropy_coef == 0.001
    assert (cfg.algo.gamma, cfg.algo.gae_lambda) == (0.99, 0.95)
    assert (cfg.reg.lambda1, cfg.reg.lambda2, cfg.reg.lambda3, cfg.reg.k) == (0.2, 0.2, 0.2, (1, 5))
    assert cfg.net.hidden == 256 and cfg.env.demo_count == 50


def test_text_round_trip():
    cfg = tiny(k="1,10", only="forward")
    back = TrainConfig.from_text(cfg.to_text())
    assert back.to_dict() == cfg.to_dict()


def test_validation():
    with pytest.raises(ValueError):
        tiny(mode="ppo").validate()
    with pytest.raises(KeyError):
        TrainConfig.from_text("[bogus]\nx = 1\n")


@pytest.mark.parametrize("mode", MODES)
def test_regularizer_weights_per_mode(mode):
    w = tiny(mode=mode).reg_weights()
    assert w.active == (mode in ("bmil", "bmil-encoding-space"))


def test_single_component_mode():
    w = tiny(only="action").reg_weights()
    assert (w.lambda_f, w.lambda_i, w.lambda_a) == (0.0, 0.0, 0.2)


# -- training loop --------------------------------------------------------------------


def run_files(cfg, out):
    return [p.read_bytes() for p in train(cfg, out_dir=out)]


def test_repeat_runs_are_byte_identical(tmp_path):
    a = run_files(tiny(), tmp_path / "a")
    b = run_files(tiny(), tmp_path / "b")
    assert a == b


def test_different_seeds_differ(tmp_path):
    assert run_files(tiny(), tmp_path / "a")[0] != run_files(tiny(**{"run.seed": 1}), tmp_path / "b")[0]


def test_zero_weights_reproduce_noreg(tmp_path):
    a = run_files(tiny(lambda1=0, lambda2=0, lambda3=0, name="x"), tmp_path / "a")
    b = run_files(tiny(mode="bmil-noreg", name="x"), tmp_path / "b")
    assert a[0] == b[0]


def test_metrics_schema(tmp_path):
    for mode in ("bmil", "gail-ff", "gail-obstack"):
        metrics, _ = train(tiny(mode=mode), out_dir=tmp_path)
        lines = metrics.read_text().splitlines()
        assert lines[0] == ",".join(metrics_header((1, 5)))
        assert len(lines) == 3


def test_noreg_skips_regularizers():
    tr = Trainer(tiny(mode="bmil-noreg"))
    tr.train()
    assert tr.n_off == 0
    assert all(tr.rows[-1][f"loss_{n}{k}"] == "" for n in "fia" for k in (1, 5))


def test_task_agnostic_keeps_imitation_away_from_belief():
    tr = Trainer(tiny(mode="task-agnostic"))
    for s in tr.slots:
        s.reset(tr.hidden_size)
    before = [p.value.copy() for p in tr.phi_params]
    tr.step()  # replay is still empty: the only belief update would be the imitation one
    assert all(np.array_equal(b, p.value) for b, p in zip(before, tr.phi_params))
    assert not tr.do_belief_update and tr.n_off == tr.cfg.algo.off_policy_steps

    bm = Trainer(tiny())
    for s in bm.slots:
        s.reset(bm.hidden_size)
    before = [p.value.copy() for p in bm.phi_params]
    bm.step()
    assert any(not np.array_equal(b, p.value) for b, p in zip(before, bm.phi_params))


def test_obstack_pads_with_first_observation():
    agent = Agent(tiny(mode="gail-obstack"), 2, 2, np.random.default_rng(0))
    hist = np.arange(12.0).reshape(6, 2)
    np.testing.assert_array_equal(agent.features(hist, 1), [0, 1, 0, 1, 0, 1, 2, 3])
    np.testing.assert_array_equal(agent.features(hist, 5), hist[2:6].reshape(-1))


def test_nonfinite_loss_aborts_with_dump(tmp_path, monkeypatch):
    cfg = tiny(out_dir=str(tmp_path))
    tr = Trainer(cfg)

    def boom(*_):
        raise ad.NonFiniteError("injected")

    monkeypatch.setattr(tr, "update_disc", boom)
    with pytest.raises(TrainingAborted):
        tr.train()
    dump = json.loads((tmp_path / f"{cfg.run_name()}.abort.json").read_text())
    assert dump["error"] == "injected"


def test_demo_env_mismatch_rejected(tmp_path):
    from bmil.trainer import load_or_record_demos
    demos = load_or_record_demos(tiny())
    with pytest.raises(ValueError):
        Trainer(tiny(env="pointmass-velonly"), demos)


# -- evaluation -------------------------------------------------------------------------


def test_evaluation_does_not_touch_parameters():
    agent = Agent(tiny(), 2, 2, np.random.default_rng(0))
    before = {k: v.tobytes() for k, v in agent.state_dict().items()}
    evaluate_agent(agent, "pointmass-nav", 3, np.random.default_rng(0))
    assert before == {k: v.tobytes() for k, v in agent.state_dict().items()}


def test_untrained_agent_scores_near_random():
    env = make_env("masked-pendulum")
    rng = np.random.default_rng(0)
    rand = np.array([run_episode(env, random_controller(env, rng), np.random.default_rng(s))[2] for s in range(30)])
    agent = Agent(tiny(env="masked-pendulum"), 2, 1, np.random.default_rng(0))
    got = evaluate_agent(agent, "masked-pendulum", 30, np.random.default_rng(1))["mean"]
    lo, hi = rand.mean() - 3 * rand.std(), rand.mean() + 3 * rand.std()
    assert lo <= got <= hi


def test_checkpoint_restores_agent(tmp_path):
    _, ckpt = train(tiny(), out_dir=tmp_path)
    agent, cfg = agent_from_checkpoint(ckpt)
    assert cfg.to_dict() == tiny().to_dict()
    r1 = evaluate(ckpt, episodes=3, rng=np.random.default_rng(4))
    r2 = evaluate_agent(agent, "pointmass-nav", 3, np.random.default_rng(4))
    assert r1["mean"] == r2["mean"]
