import os
import textwrap

import pytest

from towerlab import cli


@pytest.fixture()
def pm_config(tmp_path):
    cfg = tmp_path / "pm.ini"
    cfg.write_text(textwrap.dedent("""\
        [map]
        kind = pm
        alpha = 0.5
        Y = 0.5,1.0
        J = 120
        tail_horizon = 3000
        [basis]
        depth = 2
        refine = 12
        [tower]
        N = 12
        [roof]
        kind = cosine
        [observables]
        v = coordinate
        w = coordinate
        [grids]
        N_list = 5,10
        t_grid = 2,5
        n_max = 60
        s = 0.1j
        n_list = 1,4
        b_grid = 2,8
        omega_grid = 0
        symbols = 0,1
        q_max = 3
        [run]
        seed = 99
        samples = 20000
        """))
    return str(cfg)


@pytest.fixture()
def doubling_config(tmp_path):
    cfg = tmp_path / "db.ini"
    cfg.write_text(textwrap.dedent("""\
        [map]
        kind = doubling
        Y = 0.5,1.0
        J = 30
        tail_horizon = 600
        [basis]
        depth = 2
        refine = 8
        [roof]
        kind = power_singularity
        beta = 1.0
        [observables]
        v = coordinate
        w = coordinate
        [grids]
        N_list = 5,10
        t_grid = 2,5
        q_log = 5.0
        [run]
        seed = 7
        samples = 20000
        """))
    return str(cfg)


def run(args):
    return cli.main(args)


def test_usage_without_subcommand():
    assert run([]) == 1


def test_unknown_subcommand_usage_exit():
    assert run(["frobnicate", "--config", "x"]) == 1


def test_missing_config_is_config_error(tmp_path):
    assert run(["induce", "--config", str(tmp_path / "nope.ini"),
                "--out", str(tmp_path)]) == 3


def test_missing_seed_is_config_error(tmp_path, pm_config):
    text = open(pm_config).read().replace("seed = 99", "")
    bad = tmp_path / "noseed.ini"
    bad.write_text(text)
    assert run(["corr-flow", "--config", str(bad),
                "--out", str(tmp_path / "o")]) == 3


@pytest.mark.parametrize("sub,artifact", [
    ("induce", "cells.csv"),
    ("tail", "tail.csv"),
    ("tower", "tower.csv"),
    ("truncate", "truncate.csv"),
    ("corr-map", "corr_map.csv"),
    ("corr-flow", "corr_flow.csv"),
    ("trunc-error", "trunc_error.csv"),
    ("renewal", "renewal.csv"),
    ("decomp", "decomp.csv"),
    ("laplace", "laplace.csv"),
    ("budget", "budget.csv"),
    ("periodic", "periodic.csv"),
])
def test_subcommands_write_artifacts(sub, artifact, pm_config, tmp_path):
    out = tmp_path / "out"
    assert run([sub, "--config", pm_config, "--out", str(out)]) == 0
    assert (out / artifact).exists()


def test_roof_trunc_subcommand(doubling_config, tmp_path):
    out = tmp_path / "out"
    assert run(["roof-trunc", "--config", doubling_config,
                "--out", str(out)]) == 0
    assert (out / "roof_trunc.csv").exists()


def test_eigenfun_subcommand(pm_config, tmp_path):
    out = tmp_path / "out"
    assert run(["eigenfun", "--config", pm_config, "--out", str(out)]) == 0
    assert (out / "eigenfun.csv").exists()
    assert (out / "diophantine.csv").exists()


def test_resolvent_subcommand(pm_config, tmp_path):
    out = tmp_path / "out"
    assert run(["resolvent", "--config", pm_config, "--out", str(out)]) == 0
    body = (out / "resolvent.csv").read_text()
    assert body.startswith("b,omega,norm_estimate,resonance_flag,alpha_fit")


def test_plot_scripts_are_text_only(pm_config, tmp_path):
    out = tmp_path / "out"
    run(["tail", "--config", pm_config, "--out", str(out)])
    script = (out / "plot_tail.py").read_text()
    assert "matplotlib" in script and "savefig" in script
    assert not any(p.suffix == ".png" for p in out.iterdir())


def test_byte_identical_reruns(pm_config, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run(["corr-flow", "--config", pm_config, "--out", str(out),
                    "--threads", {"a": "1", "b": "8"}[name]]) == 0
        outs.append((out / "corr_flow.csv").read_bytes())
    assert outs[0] == outs[1]


def test_seed_flag_overrides(pm_config, tmp_path):
    out1, out2 = tmp_path / "s1", tmp_path / "s2"
    run(["corr-flow", "--config", pm_config, "--out", str(out1),
         "--seed", "1"])
    run(["corr-flow", "--config", pm_config, "--out", str(out2),
         "--seed", "2"])
    assert (out1 / "corr_flow.csv").read_bytes() != \
        (out2 / "corr_flow.csv").read_bytes()
