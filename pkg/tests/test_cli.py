import math
import os
import xml.etree.ElementTree as ET

import pytest

from metagrad import cli
from metagrad.experiments import (
    FIELDS,
    ConfigError,
    config_hash,
    parse_config,
    read_csv,
    render_figure,
    resolve_config,
)

SMALL_TABULAR = """
experiment = {name}
# tiny MDPs keep the sweep fast
n_states = 4
n_actions = 3
density = 1.0
horizon = 5
n_mdps = 3
n_trials = 3
"""

SMALL_LOLA = """
experiment = lola
modes = ["exact", "dice_on_policy", "dice_off_policy"]
inner_batches = [8]
outer_batch = 8
buffer_sample = 8
rollout_length = 10
n_updates = 12
n_seeds = 2
curve_every = 4
"""


def write_config(tmp_path, text, name="run.conf"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def run(args):
    return cli.main(["run", "--quiet", *args])


def run_to(tmp_path, text, sub, *sets):
    conf = write_config(tmp_path, text, f"{sub}.conf")
    out = tmp_path / sub
    args = [conf, "--out-dir", str(out)]
    for s in sets:
        args += ["--set", s]
    assert run(args) == 0
    return out


# config parsing ----------------------------------------------------------------------

def test_parse_config_values():
    cfg = parse_config("# comment\n\nexperiment = lola\nn_seeds = 3\nclip = null\n"
                       "modes = [\"exact\"]\noptimizer = sgd\nouter_lr=0.5\n")
    assert cfg == {"experiment": "lola", "n_seeds": 3, "clip": None, "modes": ["exact"],
                   "optimizer": "sgd", "outer_lr": 0.5}
    with pytest.raises(ConfigError):
        parse_config("experiment lola")


def test_resolve_fills_defaults_and_coerces():
    cfg = resolve_config({"experiment": "bias-scaling", "k_steps": 2, "learning_rates": [1]})
    assert cfg["k_steps"] == [2] and cfg["learning_rates"] == [1.0]
    assert cfg["batch_sizes"] == [10, 100, 1000, 10000] and cfg["seed"] == 0
    assert config_hash(cfg) == config_hash(dict(cfg))
    assert config_hash(cfg) != config_hash(dict(cfg, seed=1))
    assert config_hash(cfg) == config_hash(dict(cfg, figures=[]))


@pytest.mark.parametrize("raw, fragment", [
    ({"experiment": "maml-ablation", "batch_size": 3}, "batch_size"),
    ({"experiment": "lola", "n_mdps": 3}, "n_mdps"),
    ({"experiment": "nope"}, "nope"),
    ({}, "experiment"),
    ({"experiment": "maml-ablation", "batch_sizes": []}, "batch_sizes"),
    ({"experiment": "maml-ablation", "codes": ["SXS"]}, "SXS"),
    ({"experiment": "maml-ablation", "kinds": ["magic"]}, "magic"),
    ({"experiment": "maml-ablation", "n_trials": 2.5}, "n_trials"),
    ({"experiment": "maml-ablation", "mdp_indices": [10]}, "mdp_indices"),
    ({"experiment": "lola", "modes": ["on-on-off"]}, "outer"),
    ({"experiment": "lola", "optimizer": "rmsprop"}, "optimizer"),
    ({"experiment": "lola", "figures": ["fig9z"]}, "fig9z"),
])
def test_invalid_configs_name_the_problem(raw, fragment):
    with pytest.raises(ConfigError, match=fragment):
        resolve_config(raw)


# running ----------------------------------------------------------------------------

def test_rerun_reproduces_bytes(tmp_path):
    text = SMALL_TABULAR.format(name="bias-scaling") + "batch_sizes = [5, 20]\nk_steps = [1, 2]\n"
    a = run_to(tmp_path, text, "a")
    b = run_to(tmp_path, text, "b")
    for name in ("results.csv", "config.txt", "fig3a.svg", "fig3c.svg"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_worker_pool_matches_serial(tmp_path):
    text = SMALL_TABULAR.format(name="hessian-injection") + "coefficients = [0, 0.5]\nk_steps = [1, 2]\n"
    a = run_to(tmp_path, text, "serial")
    conf = write_config(tmp_path, text)
    assert run([conf, "--out-dir", str(tmp_path / "pool"), "--threads", "2"]) == 0
    assert (a / "results.csv").read_bytes() == (tmp_path / "pool" / "results.csv").read_bytes()


def test_csv_schema_and_finiteness(tmp_path):
    out = run_to(tmp_path, SMALL_TABULAR.format(name="bias-scaling") + "batch_sizes = [5, 20]\n",
                 "schema")
    rows = read_csv(out / "results.csv")
    assert tuple(rows[0].keys()) == FIELDS
    numeric = ("bias_norm", "variance", "mean_correlation", "compositional_bias", "slope")
    for r in rows:
        assert r["seed"] != "" and r["config_hash"] != ""
        for key in numeric:
            if r[key] != "":
                assert math.isfinite(float(r[key]))
    assert {r["aggregation"] for r in rows} == {"mdp", "mean", "slope:compositional_bias",
                                                 "slope:bias_norm"}


def test_maml_ablation_covers_all_assignments(tmp_path):
    text = SMALL_TABULAR.format(name="maml-ablation") + \
        "kinds = [\"lvc\"]\nbatch_sizes = [5, 10]\nn_mdps = 1\nn_trials = 2\n"
    rows = read_csv(run_to(tmp_path, text, "abl") / "results.csv")
    means = [r for r in rows if r["aggregation"] == "mean"]
    assert len(means) == 14 and len({r["code"] for r in means}) == 7
    assert all(r["mean_correlation"] != "" for r in means)


def test_single_row_rerun_from_config_echo(tmp_path):
    text = SMALL_TABULAR.format(name="maml-ablation") + \
        "kinds = [\"lvc\", \"ad\"]\ncodes = [\"SEE\", \"SSS\"]\nbatch_sizes = [5, 10]\n"
    full = read_csv(run_to(tmp_path, text, "full") / "results.csv")
    target = next(r for r in full if r["aggregation"] == "mdp" and r["kind"] == "ad"
                  and r["code"] == "SSS" and r["batch_size"] == "10" and r["mdp_index"] == "2")
    echo = str(tmp_path / "full" / "config.txt")
    assert run([echo, "--out-dir", str(tmp_path / "one"), "--set", "kinds=[\"ad\"]",
                "--set", "codes=[\"SSS\"]", "--set", "batch_sizes=[10]",
                "--set", "mdp_indices=[2]"]) == 0
    one = read_csv(tmp_path / "one" / "results.csv")
    row = next(r for r in one if r["aggregation"] == "mdp")
    for key in ("bias_norm", "variance", "mean_correlation"):
        assert row[key] == target[key]


def test_lola_run_rows_and_single_seed_rerun(tmp_path):
    out = run_to(tmp_path, SMALL_LOLA, "lola")
    rows = read_csv(out / "results.csv")
    seeds = [r for r in rows if r["aggregation"] == "seed"]
    assert len(seeds) == 6
    assert {r["mode"] for r in seeds} == {"exact-exact-exact", "on-on-on", "off-off-on"}
    curves = [r for r in rows if r["aggregation"] == "curve" and r["mode"] == "on-on-on"]
    assert [r["update"] for r in curves] == ["0", "4", "8", "12"]
    for r in rows:
        assert -3.0 <= float(r["mean_return"]) <= 0.0
    target = next(r for r in seeds if r["mode"] == "off-off-on" and r["seed"] == "1")
    again = run_to(tmp_path, SMALL_LOLA, "lola1", "modes=[\"dice_off_policy\"]", "seeds=[1]")
    row = next(r for r in read_csv(again / "results.csv") if r["aggregation"] == "seed")
    assert row["mean_return"] == target["mean_return"]
    assert (out / "fig4a.svg").exists() and (out / "fig4d.svg").exists()


def test_unknown_override_fails_and_leaves_nothing(tmp_path, capsys):
    conf = write_config(tmp_path, SMALL_TABULAR.format(name="bias-scaling"))
    out = tmp_path / "bad"
    assert run([conf, "--out-dir", str(out), "--set", "bogus_key=1"]) == 2
    assert "bogus_key" in capsys.readouterr().err
    assert not out.exists()


def test_failure_removes_partial_outputs(tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise ValueError("render failed")

    monkeypatch.setattr(cli, "render_figure", boom)
    conf = write_config(tmp_path, SMALL_TABULAR.format(name="bias-scaling") + "batch_sizes = [5]\n")
    out = tmp_path / "partial"
    assert run([conf, "--out-dir", str(out)]) == 2
    assert not out.exists()
    # an existing directory is kept, only this run's files go
    out.mkdir()
    (out / "keep.txt").write_text("x")
    assert run([conf, "--out-dir", str(out)]) == 2
    assert os.listdir(out) == ["keep.txt"]


# reporting -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def scaling_csv(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("report")
    conf = tmp / "c.conf"
    conf.write_text(SMALL_TABULAR.format(name="bias-scaling")
                    + "batch_sizes = [5, 20, 80]\nk_steps = [1, 2]\nfigures = []\n")
    assert run([str(conf), "--out-dir", str(tmp / "out")]) == 0
    return tmp / "out" / "results.csv"


def test_report_is_byte_deterministic(scaling_csv, tmp_path):
    for sub in ("x", "y"):
        (tmp_path / sub).mkdir()
        assert cli.main(["report", str(scaling_csv), "--figure", "fig3c",
                         "--out-dir", str(tmp_path / sub)]) == 0
    assert (tmp_path / "x" / "fig3c.svg").read_bytes() == (tmp_path / "y" / "fig3c.svg").read_bytes()


def test_compositional_figure_has_log_axes_and_one_line_per_k(scaling_csv):
    svg = render_figure(read_csv(scaling_csv), "fig3c")
    root = ET.fromstring(svg)
    ns = "{http://www.w3.org/2000/svg}"
    assert len(root.findall(f"{ns}polyline")) == 2
    labels = [t.text for t in root.findall(f"{ns}text")]
    assert "batch_size (log)" in labels and "compositional_bias (log)" in labels
    assert "k_steps=1" in labels and "k_steps=2" in labels


def test_report_errors_leave_no_file(scaling_csv, tmp_path, capsys):
    assert cli.main(["report", str(scaling_csv), "--figure", "fig4a",
                     "--out-dir", str(tmp_path)]) == 2
    assert "no lola rows" in capsys.readouterr().err
    assert os.listdir(tmp_path) == []
    bad = tmp_path / "bad.csv"
    bad.write_text("experiment,aggregation\nbias-scaling,mean\n")
    assert cli.main(["report", str(bad), "--figure", "fig3c", "--out-dir", str(tmp_path)]) == 2
    assert "missing" in capsys.readouterr().err
    assert not (tmp_path / "fig3c.svg").exists()


def test_module_entry_point_help():
    with pytest.raises(SystemExit) as exc:
        cli.main(["--help"])
    assert exc.value.code == 0
