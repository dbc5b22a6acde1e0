import math

import numpy as np
import pytest

from mobius_attn import analysis as an
from mobius_attn.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, CliError, main, parse_angle, parse_complex
from mobius_attn.config import AttentionConfig, ModelConfig
from mobius_attn.model import Model, load_checkpoint, save_checkpoint

SMALL = ["--set", "attention.d_model=16", "--set", "attention.n_heads=2", "--n", "6"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def ckpt(tmp_path):
    cfg = ModelConfig(vocab_size=32, max_seq_len=8, n_layers=3, placement="framed", seed=5,
                      attention=AttentionConfig(d_model=16, n_heads=2))
    path = tmp_path / "m.ckpt"
    save_checkpoint(Model(cfg), path)
    return path


class TestComplexLiterals:
    @pytest.mark.parametrize("text,want", [
        ("2", 2), ("-1.5", -1.5), ("i", 1j), ("-i", -1j), ("3i", 3j), ("2.5e-3i", 2.5e-3j),
        ("1+2i", 1 + 2j), ("1-i", 1 - 1j), ("-0.5+0.25i", -0.5 + 0.25j), ("e^{0 i}", 1),
    ])
    def test_grammar(self, text, want):
        assert parse_complex(text) == want

    def test_exponential(self):
        assert abs(parse_complex("e^{pi/8 i}") - complex(math.cos(math.pi / 8), math.sin(math.pi / 8))) < 1e-15
        assert abs(parse_complex("e^{-pi i}") + 1) < 1e-15

    @pytest.mark.parametrize("text", ["", "1+", "i2", "1+2j", "abc", "1e999", "e^{x i}", "--1"])
    def test_malformed(self, text):
        with pytest.raises(CliError):
            parse_complex(text)

    def test_angles(self):
        assert parse_angle("pi/2") == math.pi / 2
        assert parse_angle("-0.25") == -0.25
        assert parse_angle("2pi") == 2 * math.pi


class TestClassifyAndFlow:
    def test_circular(self, capsys):
        code, out, _ = run(capsys, "classify", "--a", "i", "--b", "0", "--c", "0", "--d=-i")
        assert code == EXIT_OK and out.strip() == "Circular"

    def test_polar(self, capsys):
        code, out, _ = run(capsys, "classify", "--polar", "a=1,pi/8", "--polar", "d=1,-pi/8")
        assert code == EXIT_OK and out.strip() == "Elliptic"

    def test_bad_literal_exit_code(self, capsys):
        code, _, err = run(capsys, "classify", "--a", "1+")
        assert code == EXIT_CONFIG and "malformed" in err
        assert run(capsys, "classify", "--polar", "q=1,0")[0] == EXIT_CONFIG

    def test_singular_matrix(self, capsys):
        code, _, err = run(capsys, "flow", "--a", "1", "--b", "2", "--c", "2", "--d", "4")
        assert code == EXIT_CONFIG

    def test_translation_flow(self, capsys):
        code, out, _ = run(capsys, "flow", "--a", "1", "--b", "1", "--c", "0", "--d", "1", "--z0", "0",
                           "--steps", "3")
        assert code == EXIT_OK
        meta, rows = an.read_csv(out)
        assert meta["class"] == "Parabolic"
        assert [float(r["re"]) for r in rows] == [0.0, 1.0, 2.0, 3.0]
        assert list(rows[0]) == list(an.FLOW_FIELDS)

    def test_identity_flow(self, capsys):
        code, out, _ = run(capsys, "flow", "--z0", "2+i", "--steps", "4")
        meta, rows = an.read_csv(out)
        assert meta["class"] == "Identity"
        assert {(r["re"], r["im"]) for r in rows} == {("2.0", "1.0")}

    def test_elliptic_flow_to_dir(self, capsys, tmp_path):
        code, out, _ = run(capsys, "flow", "--a", "e^{pi/8 i}", "--d", "e^{-pi/8 i}", "--z0", "1",
                           "--steps", "16", "--out-dir", tmp_path)
        assert code == EXIT_OK and "class: Elliptic" in out
        _, rows = an.read_csv((tmp_path / "flow.csv").read_text())
        for r in rows:
            assert abs(math.hypot(float(r["re"]), float(r["im"])) - 1) < 1e-9

    def test_byte_identical(self, capsys):
        argv = ("flow", "--a", "2+i", "--b", "0.5", "--c", "0.3i", "--z0", "0.2", "--steps", "20")
        assert run(capsys, *argv)[1] == run(capsys, *argv)[1]


class TestCheckpointCommands:
    def test_census(self, capsys, ckpt):
        code, out, _ = run(capsys, "geometry-census", ckpt)
        assert code == EXIT_OK
        assert out.startswith("# tol=0.001\n")
        assert "layer,head,dim,class,tau_re,tau_im,k_mag,k_arg" in out

    def test_census_files(self, capsys, ckpt, tmp_path):
        out_dir = tmp_path / "c"
        run(capsys, "geometry-census", ckpt, "--out-dir", out_dir, "--tol", "0.1")
        meta, rows = an.read_csv((out_dir / "census.csv").read_text())
        assert meta == {"tol": "0.1"} and len(rows) == 16
        _, counts = an.read_csv((out_dir / "census_counts.csv").read_text())
        assert [c["layer"] for c in counts] == ["0", "2"]

    def test_census_requires_mobius(self, capsys, tmp_path):
        cfg = ModelConfig(vocab_size=32, max_seq_len=8, n_layers=1, placement="custom", layer_kinds=("vanilla",),
                          attention=AttentionConfig(d_model=16, n_heads=2))
        save_checkpoint(Model(cfg), tmp_path / "v.ckpt")
        assert run(capsys, "geometry-census", tmp_path / "v.ckpt")[0] == EXIT_CONFIG

    def test_missing_checkpoint(self, capsys, tmp_path):
        assert run(capsys, "geometry-census", tmp_path / "none.ckpt")[0] == EXIT_CONFIG

    def test_sparsity(self, capsys, ckpt, tmp_path):
        code, out, err = run(capsys, "sparsity", ckpt, "--batch", "4", "--seed", "3", "--out-dir", tmp_path)
        assert code == EXIT_OK and "mobius=" in err
        meta, rows = an.read_csv((tmp_path / "sparsity.csv").read_text())
        assert meta["batch"] == "4" and meta["seed"] == "3" and meta["threshold"] == "0.001"
        for r in rows:
            assert 0.0 <= float(r["zero_frac"]) <= 1.0
            M = an.read_matrix(tmp_path / f"attn_layer{r['layer']}_{r['kind']}{r['head']}.csv")
            np.testing.assert_allclose(M.sum(axis=1), 1.0, atol=1e-12)

    def test_sparsity_deterministic(self, capsys, ckpt):
        a = run(capsys, "sparsity", ckpt, "--batch", "3")[1]
        b = run(capsys, "sparsity", ckpt, "--batch", "3")[1]
        assert a == b


class TestTrainAndCount:
    def test_train_zero_steps(self, capsys, tmp_path):
        code, out, _ = run(capsys, "train", "--task", "copy", "--steps", "0", "--out-dir", tmp_path)
        assert code == EXIT_OK
        lines = out.splitlines()
        assert lines[0] == "step,loss,token_acc,lr" and lines[1].startswith("0,")
        assert (tmp_path / "metrics.csv").exists()
        load_checkpoint(tmp_path / "checkpoint.ckpt")

    def test_train_byte_identical(self, capsys, tmp_path):
        argv = ["train", "--task", "reverse", "--steps", "3", "--seed", "2", "--set", "attention.d_model=16",
                "--set", "train.batch_size=4", "--set", "train.eval_batch_size=8"]
        run(capsys, *argv, "--out-dir", tmp_path / "a")
        run(capsys, *argv, "--out-dir", tmp_path / "b")
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_flags_override_config_file(self, capsys, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("[train]\ntask = reverse\nsteps = 50\n[attention]\nd_model = 16\n")
        code, out, _ = run(capsys, "train", "--config", cfg, "--steps", "0", "--task", "copy")
        assert code == EXIT_OK and len(out.splitlines()) == 2

    def test_config_diagnostics(self, capsys, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("n_layers = 2\nwidth = 9\n")
        code, _, err = run(capsys, "count-params", "--config", cfg)
        assert code == EXIT_CONFIG and "bad.cfg:2" in err and "width" in err
        assert run(capsys, "count-params", "--set", "attention.n_heads=5")[0] == EXIT_CONFIG
        assert run(capsys, "count-params", "--set", "n_layers=two")[0] == EXIT_CONFIG

    def test_count_params_docs_table(self, capsys, tmp_path):
        # the two configs documented in the README
        code, out, _ = run(capsys, "count-params", "--set", "model.n_layers=3", "--set", "attention.d_model=16",
                           "--set", "attention.n_heads=2", "--set", "model.max_seq_len=8")
        assert code == EXIT_OK and "total,10256" in out.splitlines()
        code, out, _ = run(capsys, "count-params", "--set", "model.n_layers=2", "--set", "model.placement=custom",
                           "--set", "model.layer_kinds=vanilla,vanilla", "--set", "attention.d_model=32",
                           "--set", "model.max_seq_len=8")
        assert code == EXIT_OK and "total,27904" in out.splitlines()


class TestGradCheckCommand:
    def test_framed_passes(self, capsys):
        code, out, _ = run(capsys, "grad-check", *SMALL)
        assert code == EXIT_OK and "PASS" in out
        groups = [line.split(",")[0] for line in out.splitlines()[1:-1]]
        assert groups == ["embed", "layers.0", "layers.1", "layers.2", "head"]

    def test_vanilla_passes(self, capsys):
        code, out, _ = run(capsys, "grad-check", *SMALL, "--set", "model.placement=custom",
                           "--set", "model.layer_kinds=vanilla,vanilla,vanilla")
        assert code == EXIT_OK and "PASS" in out

    def test_corrupted_adjoint_fails(self, capsys):
        code, out, _ = run(capsys, "grad-check", *SMALL, "--corrupt-adjoint", "gelu")
        assert code == EXIT_NUMERIC and "FAIL" in out
