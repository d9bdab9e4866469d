import textwrap

import pytest

TINY = textwrap.dedent("""\
    name: tiny
    seeds: [0]
    output_dir: {out}
    horizon: 10
    track:
      episode_limit: 40
      frame_stack: 2
    ppo:
      total_steps: 512
      n_envs: 4
      steps_per_env: 32
      minibatch: 64
      epochs: 1
      hidden: [16]
    encoder:
      n_per_mode: 12
      epochs: 3
      hidden: 8
    eval:
      n_episodes: 3
    sweep:
      values: [0.5, 1e10]
    grid:
      n_width: 2
      n_size: 2
      episodes_per_cell: 1
    """)


@pytest.fixture
def tiny_config(tmp_path):
    """Path of a seconds-scale run config writing under ``tmp_path/out``."""
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY.format(out=tmp_path / "out"))
    return path


_RESULTS = pytest.StashKey[dict]()


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", help="also run the long PPO training suites")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="long training run; pass --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    outcome = getattr(item, "criterion_outcome", None)
    if call.excinfo is not None:
        if call.excinfo.errisinstance(pytest.skip.Exception):
            outcome = outcome or "SKIP"
        else:
            outcome = "FAIL"
    elif call.when == "call":
        outcome = "PASS"
    item.criterion_outcome = outcome
    number, name = marker.args
    details = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    item.config.stash.setdefault(_RESULTS, {})[number] = (name, outcome, details)


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        name, outcome, details = results[number]
        line = f"criterion {number:2d} {name}: {outcome}"
        terminalreporter.write_line(f"{line} ({details})" if details else line)
