import pytest
from hypothesis import given, settings, strategies as st

from intertwine.config import ConfigError, ScenarioConfig, dumps, loads, parse_config

names = st.text("abcdefghijklmnopqrstuvwxyz_0123456789", min_size=1, max_size=12)
scalars = st.one_of(st.integers(-10**6, 10**6), st.floats(allow_nan=False, allow_infinity=False), st.booleans(),
                    st.text(max_size=10))
values = st.one_of(scalars, st.lists(scalars, max_size=4))


@st.composite
def configs(draw):
    dt = draw(st.floats(1e-6, 1.0))
    return ScenarioConfig(
        scenario=draw(st.text("abcdefghij-", min_size=1, max_size=16)),
        dt=dt,
        T=dt * draw(st.integers(1, 5000)),
        n_paths=draw(st.integers(1, 10**7)),
        seed=draw(st.integers(0, 2**63)),
        kernel=draw(st.dictionaries(names, values, max_size=4)),
        checks=draw(st.dictionaries(names, values, max_size=3)),
        out=draw(st.one_of(st.none(), st.text(min_size=1, max_size=20))),
        workers=draw(st.integers(1, 64)),
        mutate=draw(st.booleans()),
    )


@settings(max_examples=200)
@given(cfg=configs())
def test_round_trip(cfg):
    assert loads(dumps(cfg)) == cfg


def test_example_file():
    text = """
    # Cauchy coupling
    scenario = "cauchy-wave"
    sim.dt = 0.001
    sim.T = 1
    sim.n_paths = 100000
    sim.seed = 42
    sim.workers = 1
    sim.mutate = false
    kernel.y0 = 0.0
    check.ks_threshold = 0.01628
    out.dir = results
    """
    cfg = loads(text)
    assert cfg.T == 1.0 and isinstance(cfg.T, float)
    assert cfg.out == "results"
    assert cfg.kernel == {"y0": 0.0} and cfg.checks == {"ks_threshold": 0.01628}


def test_overrides_on_base():
    base = ScenarioConfig("cauchy-wave", 1e-3, 1.0, 100, 1, kernel={"y0": 0.0})
    cfg = loads("sim.seed = 9\nkernel.y0 = 2.5\n", base=base)
    assert (cfg.seed, cfg.kernel["y0"], cfg.dt) == (9, 2.5, 1e-3)


@pytest.mark.parametrize("text", [
    "sim.bogus = 1",
    "kernel.unknown = 1",
    "check.nope = 1",
    "extra.key = 1",
    "out.path = 'x'",
    'scenario = "pitman"',
])
def test_unknown_keys_rejected_against_base(text):
    base = ScenarioConfig("cauchy-wave", 1e-3, 1.0, 100, 1, kernel={"y0": 0.0}, checks={"alpha": 0.01})
    with pytest.raises(ConfigError):
        loads(text, base=base)


@pytest.mark.parametrize("text", ["no equals sign", "= 3", "sim.dt = [1, 2", "a.b.c", "sim.dt = 1\nsim.dt = 2"])
def test_malformed_lines(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_missing_sim_keys():
    with pytest.raises(ConfigError, match="missing"):
        loads('scenario = "x"\nsim.dt = 0.1\n')


@pytest.mark.parametrize("field,value", [("dt", 0.0), ("dt", -1.0), ("T", 0.0), ("n_paths", 0), ("seed", -1),
                                         ("workers", 0), ("n_paths", 1.5), ("n_paths", True), ("mutate", 1)])
def test_field_validation(field, value):
    kw = dict(scenario="x", dt=0.1, T=1.0, n_paths=10, seed=0)
    kw[field] = value
    with pytest.raises(ConfigError):
        ScenarioConfig(**kw)


def test_horizon_shorter_than_step():
    with pytest.raises(ConfigError):
        ScenarioConfig("x", 0.5, 0.1, 10, 0)
