import pytest

from pgsearch.config import Config, ConfigError, config_hash, dump_config, from_kv, load_config, parse_lines, to_kv


def test_defaults_round_trip():
    cfg = Config()
    assert from_kv(to_kv(cfg)) == cfg


def test_parse_and_override(tmp_path):
    f = tmp_path / "c.txt"
    f.write_text("# comment\ntask=neg-ackley\nagent.gamma=0.9\nseeds=1,2\nosel.p_values=10,20\n\ntraj.monotonic=true\n")
    cfg = load_config(f, ["agent.w_cons=0", "search.T_test=70"])
    assert cfg.run.task == "neg-ackley"
    assert cfg.run.agent.gamma == 0.9 and cfg.run.agent.w_cons == 0.0
    assert cfg.run.seeds == (1, 2)
    assert cfg.run.monotonic is True and cfg.run.T_test == 70
    assert cfg.osel.grid.p_values == (10.0, 20.0)


@pytest.mark.parametrize(
    "line",
    ["agent.bogus=1", "gamma=0.9", "task=sphere", "agent.epochs=zero", "traj.monotonic=maybe", "agent.a_max=0.1", "no-equals"],
)
def test_invalid_lines(line):
    with pytest.raises(ConfigError):
        from_kv(parse_lines(line))


def test_hash_ignores_order_and_output_dir():
    a = from_kv({"task": "neg-ackley", "agent.gamma": "0.9"})
    b = from_kv({"agent.gamma": "0.90", "task": "neg-ackley", "output.dir": "elsewhere"})
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(from_kv({"task": "neg-ackley"}))
    assert len(config_hash(a)) == 16


def test_dump_is_loadable(tmp_path):
    cfg = from_kv({"task": "neg-rastrigin", "osel.encoder_latent_dim": "16", "osel.k_tie": "50"})
    (tmp_path / "d.txt").write_text(dump_config(cfg))
    assert load_config(tmp_path / "d.txt") == cfg
