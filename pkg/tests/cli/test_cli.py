from efficient_vb.cli import COMMANDS, build_parser, main
import pytest

CONFIG = """\
model:
  name: sv
data:
  simulation:
    params: {x_bar: -1.0, rho: 0.95, sigma: 0.25}
    n_times: 40
    seed: 2
methods: [efficient-vb]
efficient_vb:
  iterations: 10
  recalibration_interval: 5
diagnostics:
  n_draws: 20
  n_state_draws: 5
  window_start: 0
  window_size: 3
  max_lag: 1
"""


def write_config(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text(CONFIG)
    return str(path)


def test_every_command_takes_the_common_flags():
    parser = build_parser()

    for command in COMMANDS:
        args = parser.parse_args([command, "--config", "c.yaml", "--seed", "4", "--threads", "2", "--out", "o"])
        assert (args.command, args.seed, args.threads, args.out) == (command, 4, 2, "o")


def test_config_flag_is_required():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["fit"])


def test_simulate_then_fit(tmp_path):
    config = write_config(tmp_path)
    out = tmp_path / "out"

    assert main(["simulate", "--config", config, "--out", str(out)]) == 0
    assert (out / "data.csv").exists()
    assert main(["fit", "--config", config, "--out", str(out), "--seed", "9"]) == 0
    assert (out / "draws_efficient-vb.csv").exists()
    assert "seed: 9" in (out / "config.yaml").read_text()
    assert main(["diagnose", "--config", config, "--out", str(out)]) == 0


def test_missing_config_file_fails(tmp_path):
    assert main(["fit", "--config", str(tmp_path / "missing.yaml")]) == 1


def test_invalid_config_fails(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("data: {}\n")

    assert main(["fit", "--config", str(path), "--out", str(tmp_path / "out")]) == 1


def test_data_with_missing_value_fails(tmp_path):
    data = tmp_path / "data.csv"
    data.write_text("time,y1\n1,0.5\n2,\n3,-0.2\n")
    path = tmp_path / "config.yaml"
    path.write_text(f"model:\n  name: sv\ndata:\n  path: {data}\nmethods: [efficient-vb]\n")

    assert main(["fit", "--config", str(path), "--out", str(tmp_path / "out")]) == 1
