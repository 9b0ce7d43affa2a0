import csv

import pytest
import yaml

from fusesim import cli
from fusesim.config import DEFAULTS, dump_config, load_config, parse_config, validate
from fusesim.errors import ConfigError

SMALL_KERNEL = """
kernel_sim:
  prompt_len: 4096
  chunk_size: 512
  chunks: [0, 7]
  decode_batch_sizes: [8]
  decode_context: 2048
  strategies: [serial, smaware]
"""

SMALL_SERVE = """
serve:
  num_requests: 12
  prefill: {kind: uniform, lo: 256, hi: 2048}
  decode: {kind: uniform, lo: 4, hi: 24}
  reference_context: 4096
"""

SMALL_VERIFY = """
attn_verify:
  instances: 15
  max_context: 256
"""


def run(tmp_path, name, command, text, *extra):
    cfg = tmp_path / f"{name}.yaml"
    cfg.write_text(text)
    out = tmp_path / f"{name}.csv"
    return cli.main([command, "--config", str(cfg), "--out", str(out), *extra]), out


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- config ----------------------------------------------------------------------

def test_defaults_validate():
    validate(DEFAULTS)
    assert load_config(None) == DEFAULTS


def test_unknown_key_names_the_field():
    with pytest.raises(ConfigError, match="kernel_sim"):
        parse_config("kernel_sim:\n  chunk_sise: 3\n")


def test_yaml_error_reports_line():
    with pytest.raises(ConfigError, match=r"line \d+, column \d+"):
        parse_config("seed: 1\ngpu: [unclosed\n")


@pytest.mark.parametrize("text", ["gpu:\n  num_sms: 0\n", "model:\n  num_q_heads: 6\n", "serve:\n  qps: []\n"])
def test_invalid_values_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_resolved_config_round_trips():
    cfg = parse_config(SMALL_KERNEL + SMALL_SERVE)
    assert parse_config(dump_config(cfg)) == cfg


def test_printed_config_reparses(tmp_path, capsys):
    status, _ = run(tmp_path, "v", "attn-verify", SMALL_VERIFY, "--seed", "9")
    assert status == cli.EXIT_OK
    printed = capsys.readouterr().out.split("# resolved config\n", 1)[1].split("# end resolved config")[0]
    cfg = parse_config(printed)
    assert cfg["seed"] == 9 and cfg["attn_verify"]["instances"] == 15
    assert yaml.safe_load(printed) == cfg


# -- exit codes ------------------------------------------------------------------

def test_attn_verify_passes(tmp_path):
    status, out = run(tmp_path, "v", "attn-verify", SMALL_VERIFY)
    assert status == cli.EXIT_OK
    assert {r["suite"] for r in rows(out)} == {"oracle_equivalence", "split_invariance", "causality"}


def test_attn_verify_detects_mask_fault(tmp_path):
    status, out = run(tmp_path, "v", "attn-verify", SMALL_VERIFY + "  fault_mask_shift: 1\n")
    assert status == cli.EXIT_FAIL
    failed = {r["suite"] for r in rows(out) if r["passed"] == "0"}
    assert "causality" in failed


@pytest.mark.parametrize("text", ["seed: [1\n", "bogus: 1\n", "attn_verify:\n  tolerance: -1\n"])
def test_bad_config_exits_2(tmp_path, text, capsys):
    status, _ = run(tmp_path, "bad", "attn-verify", text)
    assert status == cli.EXIT_USAGE
    assert "config error" in capsys.readouterr().err


def test_missing_config_file_exits_2(tmp_path):
    assert cli.main(["serve-sim", "--config", str(tmp_path / "nope.yaml")]) == cli.EXIT_USAGE


def test_unknown_strategy_flag_exits_2(tmp_path):
    status, _ = run(tmp_path, "k", "kernel-sim", SMALL_KERNEL, "--strategies", "serial,teleport")
    assert status == cli.EXIT_USAGE


def test_missing_trace_file_exits_2(tmp_path):
    status, _ = run(tmp_path, "s", "serve-sim", f"serve:\n  trace_file: {tmp_path / 'none.csv'}\n")
    assert status == cli.EXIT_USAGE


# -- outputs ---------------------------------------------------------------------

def test_kernel_sim_rows_and_trace(tmp_path):
    status, out = run(tmp_path, "k", "kernel-sim", SMALL_KERNEL, "--trace", "--strategies", "serial,warp")
    assert status == cli.EXIT_OK
    got = rows(out)
    assert [(r["run_id"], r["strategy"]) for r in got] == [
        ("bs8-c000", "serial"), ("bs8-c000", "warp"), ("bs8-c007", "serial"), ("bs8-c007", "warp")
    ]
    assert all(float(r["makespan"]) >= float(r["oracle"]) for r in got)
    trace = out.with_suffix(".trace.tsv").read_text().splitlines()
    assert trace[0].split("\t") == ["run_id", "time", "sm", "event", "task", "op"]
    assert len(trace) > 100


def test_threads_do_not_change_output(tmp_path):
    _, a = run(tmp_path, "a", "kernel-sim", SMALL_KERNEL)
    _, b = run(tmp_path, "b", "kernel-sim", SMALL_KERNEL, "--threads", "2")
    assert a.read_bytes() == b.read_bytes()


def test_microbench_columns(tmp_path):
    status, out = run(tmp_path, "m", "microbench", "microbench:\n  compute_iters: [50, 100]\n")
    assert status == cli.EXIT_OK
    got = rows(out)
    assert len(got) == 12
    assert all(float(r["oracle"]) <= float(r["makespan"]) * (1 + 1e-12) for r in got)


def test_serve_sim_from_trace_file(tmp_path):
    trace = tmp_path / "trace.csv"
    trace.write_text("arrival_time,prefill_tokens,decode_tokens\n0,1500,5\n10,700,9\n")
    status, out = run(tmp_path, "s", "serve-sim", SMALL_SERVE + f"  trace_file: {trace}\n")
    assert status == cli.EXIT_OK
    got = rows(out)
    assert len(got) == 4 and {r["qps"] for r in got} == {"trace"}


def test_figures_are_written(tmp_path):
    pytest.importorskip("matplotlib")
    status, out = run(tmp_path, "s", "serve-sim", SMALL_SERVE + "report: {figures: true}\n")
    assert status == cli.EXIT_OK
    assert out.with_suffix(".png").stat().st_size > 1000


@pytest.mark.parametrize("command,text", [
    ("attn-verify", SMALL_VERIFY),
    ("kernel-sim", SMALL_KERNEL),
    ("serve-sim", SMALL_SERVE),
])
def test_rerun_is_byte_identical(tmp_path, command, text):
    _, a = run(tmp_path, "a", command, text, "--seed", "3")
    _, b = run(tmp_path, "b", command, text, "--seed", "3")
    assert a.read_bytes() == b.read_bytes()
