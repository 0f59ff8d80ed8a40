import csv
import io
import json
import os
import subprocess
import sys

import pytest

from tilekit.cli import (
    EXIT_FAIL,
    EXIT_OK,
    EXIT_USAGE,
    LayerRow,
    load_layers,
    main,
    read_layers,
    write_layers,
)
from tilekit.core import ConvShape, Padding
from tilekit.errors import ParseError
from tilekit.tuner import load_db

SMALL_TABLE = """\
# two tiny layers
Layer,Window,Stride,Input,Output
tiny_a,3,1,8x8x4,8x8x4
tiny_b,1,2,9x9x3,5x5x2
"""

FAST = ["--warmup", "1", "--samples", "3"]


@pytest.fixture
def small_table(tmp_path):
    path = tmp_path / "layers.csv"
    path.write_text(SMALL_TABLE)
    return path


class TestLayerTables:
    def test_vgg_first_row(self):
        assert load_layers("vgg")[0] == ConvShape(1, 224, 224, 3, 64, 3, 3, 1, Padding.SAME)

    def test_resnet_pointwise_row(self):
        rows = {r.name: r for r in read_layers("resnet")}
        assert rows["resnet_b2a"].to_shape() == ConvShape(1, 56, 56, 64, 64, 1, 1, 1, Padding.SAME)
        stem = rows["resnet_conv1"].to_shape(4)
        assert (stem.batch, stem.window_rows, stem.stride, stem.out_rows, stem.padding) == \
            (4, 7, 2, 112, Padding.SAME)

    @pytest.mark.parametrize("name", ["vgg", "resnet"])
    def test_builtin_tables_are_consistent(self, name):
        rows = read_layers(name)
        assert rows and len({r.name for r in rows}) == len(rows)
        for row in rows:
            shape = row.to_shape()
            assert (shape.out_rows, shape.out_cols, shape.features) == row.output

    def test_valid_padding_inferred(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("Layer,Window,Stride,Input,Output\nv,3,1,10x10x1,8x8x2\n")
        assert load_layers(path)[0].padding is Padding.VALID

    def test_missing_column_is_named(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("Layer,Window,Input,Output\nv,3,10x10x1,8x8x2\n")
        with pytest.raises(ParseError, match="Stride") as info:
            read_layers(path)
        assert info.value.column == "Stride"

    @pytest.mark.parametrize("row, column, line", [
        ("v,3,1,10x10,8x8x2", "Input", 3),
        ("v,three,1,10x10x1,8x8x2", "Window", 3),
        ("v,3,0,10x10x1,8x8x2", "Stride", 3),
        ("v,3,1,10x10x1", "Output", 3),
        ("v,3,1,10x10x1,7x7x2", "Output", 3),
    ])
    def test_malformed_rows(self, tmp_path, row, column, line):
        path = tmp_path / "t.csv"
        path.write_text(f"Layer,Window,Stride,Input,Output\n\n{row}\n")
        with pytest.raises(ParseError) as info:
            read_layers(path)
        assert (info.value.line, info.value.column) == (line, column)

    @pytest.mark.parametrize("name", ["vgg", "resnet"])
    def test_round_trip(self, tmp_path, name):
        rows = read_layers(name)
        write_layers(rows, tmp_path / "copy.csv")
        assert read_layers(tmp_path / "copy.csv") == rows

    def test_serialized_text(self):
        text = write_layers([LayerRow("x", 3, 1, (4, 4, 2), (4, 4, 8))])
        assert text == "Layer,Window,Stride,Input,Output\nx,3,1,4x4x2,4x4x8\n"


class TestCommands:
    def test_verify_gemm(self, capsys):
        assert main(["verify", "--op", "gemm", "--max-dim", "128"]) == EXIT_OK
        assert "0 failures" in capsys.readouterr().out

    def test_verify_conv(self):
        assert main(["verify", "--op", "conv", "--max-dim", "12"]) == EXIT_OK

    def test_layers_one_row_per_layer_and_algo(self, small_table, capsys):
        code = main(["layers", "--file", str(small_table), "--batch", "1",
                     "--algos", "naive,tiled,im2col,winograd", *FAST])
        rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
        assert code == EXIT_OK
        assert [(r["layer"], r["algo"]) for r in rows] == [
            (layer, algo) for layer in ("tiny_a", "tiny_b")
            for algo in ("naive", "tiled", "im2col", "winograd")
        ]
        status = {(r["layer"], r["algo"]): r["status"] for r in rows}
        assert status[("tiny_b", "winograd")] == "unsupported"
        assert all(s == "ok" for k, s in status.items() if k != ("tiny_b", "winograd"))

    def test_layers_json_to_file(self, small_table, tmp_path):
        out = tmp_path / "r.json"
        assert main(["layers", "--file", str(small_table), "--algos", "naive", "--format", "json",
                     "--out", str(out), *FAST]) == EXIT_OK
        data = json.loads(out.read_text())
        assert [d["layer"] for d in data] == ["tiny_a", "tiny_b"]
        assert all(float(d["gflops"]) > 0 for d in data)

    def test_tune_adds_records(self, tmp_path, capsys):
        db = tmp_path / "db.ndjson"
        code = main(["tune", "--op", "gemm", "--m", "33", "--n", "17", "--k", "9", "--space", "table2",
                     "--device", "host-cpu", "--db", str(db), *FAST])
        assert code == EXIT_OK
        records = load_db(db)
        assert len(records) == 7 and all(r.valid for r in records)
        assert "best " in capsys.readouterr().out

    def test_tune_uses_env_db(self, tmp_path):
        assert main(["tune", "--op", "conv", "--height", "6", "--width", "6", "--channels", "2",
                     "--features", "2", "--space", "table2", *FAST]) == EXIT_OK
        assert load_db(os.environ["TILEKIT_DB"])

    def test_tune_without_fitting_config(self, tmp_path):
        dev = tmp_path / "tiny.toml"
        dev.write_text('[[device]]\nname = "tiny"\ncompute_units = 1\n'
                       'local_memory_bytes = 0\ncache_line_bytes = 64\nregister_budget = 8\n')
        code = main(["tune", "--m", "8", "--n", "8", "--k", "8", "--device", str(dev), *FAST])
        assert code == EXIT_FAIL

    def test_bench_prints_record(self, capsys, tmp_path):
        db = tmp_path / "b.ndjson"
        assert main(["bench", "--m", "16", "--n", "16", "--k", "16", "--config", "4x4_8x8_loc",
                     "--db", str(db), *FAST]) == EXIT_OK
        rec = json.loads(capsys.readouterr().out)
        assert rec["config"] == "4x4_8x8_loc" and rec["valid"]
        assert len(load_db(db)) == 1

    def test_roofline_csv(self, tmp_path):
        out = tmp_path / "r.csv"
        assert main(["roofline", "--sizes", "8,16", "--config", "4x4_8x8_noloc,8x4_4x8_loc",
                     "--out", str(out), *FAST]) == EXIT_OK
        rows = list(csv.DictReader(out.open()))
        assert len(rows) == 16
        diag = {r["problem"]: float(r["oi_flops_per_byte"]) for r in rows}
        assert diag["gemm:16x16x16:NN:a=1.0:b=1.0"] == 2.0

    @pytest.mark.parametrize("argv", [
        ["verify", "--bogus"],
        ["frobnicate"],
        [],
        ["tune", "--m", "0"],
        ["layers", "--file", "/nonexistent/layers.csv"],
        ["bench", "--device", "/nonexistent/dev.toml"],
        ["bench", "--config", "not_a_config"],
        ["layers", "--file", "vgg", "--algos", "fft"],
    ])
    def test_usage_errors(self, argv):
        assert main(argv) == EXIT_USAGE

    def test_help_exits_zero(self, capsys):
        assert main(["--help"]) == EXIT_OK

    def test_console_script_module(self):
        proc = subprocess.run([sys.executable, "-m", "tilekit.cli", "verify", "--nope"],
                              capture_output=True, text=True)
        assert proc.returncode == EXIT_USAGE
