import argparse

import pytest

from oracles import small_message_latency
from rdma_channel.bench import (
    CSV_HEADER,
    BenchConfig,
    BenchResult,
    render,
    report,
    run,
    run_bandwidth,
    run_chunk_sweep,
    run_latency,
)
from rdma_channel.cli import main, parse_sizes
from rdma_channel.errors import ConfigError
from rdma_channel.fabric import CostModel

MIB = 1 << 20
QUICK = dict(iterations=16, warmup=4)


def csv_lines(text):
    return [line for line in text.splitlines() if not line.startswith("#")]


def test_parse_sizes_suffixes():
    assert parse_sizes("4,1K,2M") == (4, 1024, 2 * MIB)
    assert parse_sizes("4,8,") == (4, 8)
    for bad in ("4,x", ","):
        with pytest.raises(argparse.ArgumentTypeError):
            parse_sizes(bad)


@pytest.mark.parametrize("bad", [dict(window=0), dict(iterations=0), dict(sizes=()), dict(sizes=(0,)),
                                 dict(test="sweep", variant="basic"), dict(test="nope")])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        BenchConfig(**bad)


def test_piggyback_latency_equals_closed_form():
    cfg = BenchConfig("latency", "piggyback", (4,), **QUICK)
    assert run_latency(cfg).metric(4) == pytest.approx(small_message_latency(CostModel(), 4), rel=1e-9)


def test_basic_latency_clears_two_extra_op_overheads():
    model = CostModel()
    basic = run_latency(BenchConfig("latency", "basic", (4,), **QUICK)).metric(4)
    assert basic >= model.raw_half_round_trip(1) + 2 * model.op_overhead


def test_render_header_metadata_and_schema():
    res = run(BenchConfig("latency", "piggyback", (4, 64), **QUICK))
    text = render([res])
    lines = text.splitlines()
    assert lines[0].startswith("# ") and "window=64" in lines[0] and "net_bytes_per_us=" in lines[0]
    assert lines[1] == CSV_HEADER
    rows = [line.split(",") for line in lines[2:]]
    assert [r[2] for r in rows] == ["4", "64"]
    assert {r[5] for r in rows} == {"latency_us"}


def test_csv_counters_match_the_snapshot_deltas():
    res = run_bandwidth(BenchConfig("bandwidth", "zerocopy", (MIB,), window=4, **QUICK))
    (row,) = res.rows
    fields = dict(zip(CSV_HEADER.split(","), row.csv_fields()))
    c = row.counters_a + row.counters_b
    assert int(fields["rdma_reads"]) == c.rdma_reads == 16
    assert int(fields["payload_copy_bytes"]) == c.payload_bytes_copied
    assert int(fields["wire_bytes"]) == c.wire_bytes


def test_empty_results_are_an_error(tmp_path):
    with pytest.raises(ValueError):
        render([])
    with pytest.raises(ValueError):
        report(BenchResult(BenchConfig()), tmp_path / "x.csv")


def test_bandwidth_grows_with_the_window():
    values = [run_bandwidth(BenchConfig("bandwidth", "pipeline", (65536,), window=w, iterations=32,
                                        warmup=8)).metric()
              for w in (1, 2, 8, 32)]
    assert values == sorted(values)
    assert values[-1] > 1.5 * values[0]


def test_chunk_as_big_as_the_message_is_one_write():
    cfg = BenchConfig("sweep", "pipeline", (16384,), window=1, iterations=1, warmup=0,
                      sweep_chunks=(16384,))
    (row,) = run_chunk_sweep(cfg).rows
    # one data frame, one ack frame back
    assert row.counters.rdma_writes == 2 and row.chunk_bytes == 16384


def test_cli_runs_are_byte_identical(tmp_path):
    args = ["bandwidth", "--variant", "pipeline", "--sizes", "64K", "--window", "8",
            "--iterations", "16", "--warmup", "8", "--seed", "7"]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert csv_lines(a.read_text())[0] == CSV_HEADER


def test_cli_writes_to_stdout(capsys):
    assert main(["latency", "--iterations", "4", "--warmup", "0"]) == 0
    out = capsys.readouterr().out
    (row,) = [line for line in csv_lines(out)[1:]]
    assert row.startswith("latency,piggyback,4,16384,1,latency_us,")


def test_cli_no_regcache_registers_per_transfer(tmp_path):
    def regs(*extra):
        path = tmp_path / "r.csv"
        assert main(["bandwidth", "--variant", "zerocopy", "--sizes", "1M", "--window", "4",
                     "--iterations", "8", "--warmup", "0", "--out", str(path), *extra]) == 0
        row = csv_lines(path.read_text())[1].split(",")
        return int(row[9]), int(row[10])

    assert regs() == (2, 0)  # first touch of each buffer, cached afterwards
    assert regs("--no-regcache") == (16, 16)


def test_cli_config_and_model_files(tmp_path):
    model = tmp_path / "model.txt"
    model.write_text("op_overhead_us=10\n")
    conf = tmp_path / "bench.txt"
    conf.write_text("variant=piggyback\nsizes=4\niterations=4\nwarmup=0\n")
    out = tmp_path / "o.csv"
    assert main(["latency", "--config", str(conf), "--model", str(model), "--out", str(out)]) == 0
    value = float(csv_lines(out.read_text())[1].split(",")[6])
    assert value == pytest.approx(small_message_latency(CostModel(op_overhead=10), 4))
    assert "op_overhead_us=10" in out.read_text().splitlines()[0]


@pytest.mark.parametrize("argv", [
    ["sweep", "--variant", "basic"],
    ["latency", "--window", "0"],
    ["latency", "--config", "/nonexistent/bench.txt"],
    ["latency", "--iterations", "2", "--out", "/nonexistent/dir/out.csv"],
    ["latency", "--config", "SIZES_FILE"],
])
def test_cli_errors_exit_nonzero(argv, capsys, tmp_path):
    if "SIZES_FILE" in argv:
        bad = tmp_path / "bench.txt"
        bad.write_text("sizes=4,lots\n")
        argv = [str(bad) if a == "SIZES_FILE" else a for a in argv]
    assert main(argv) == 1
    assert "error" in capsys.readouterr().err


def test_cli_unknown_config_key(tmp_path, capsys):
    conf = tmp_path / "bench.txt"
    conf.write_text("windw=4\n")
    assert main(["latency", "--config", str(conf)]) == 1
    assert "windw" in capsys.readouterr().err
