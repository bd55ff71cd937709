import csv
import subprocess
import sys

import numpy as np
import pytest

from casreg import __version__
from casreg.cli import build_parser, main, parse_grid, UsageError
from casreg.deform import jacobian_report, load_field
from casreg.evaluation import dice
from casreg.mas import Atlas, save_atlas
from casreg.phantom import make_phantom
from casreg.volume import load_labels, load_volume, save_volume

FAST = ["--cascades", "2", "--iters", "5", "--threads", "1"]


def _csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out-dir", str(out), "--seed", "3", "--dims", "20",
                 "--n-atlases", "4", "--amplitude", "2", "--smoothness", "3"]) == 0
    return out


@pytest.fixture
def pair(tmp_path):
    img, lab = make_phantom(0, (20, 20, 20))
    save_volume(img.astype(np.float32), tmp_path / "a.nii.gz")
    save_volume(lab.astype(np.uint8), tmp_path / "a_labels.nii.gz")
    img2, _ = make_phantom(1, (20, 20, 20))
    save_volume(img2.astype(np.float32), tmp_path / "b.nii.gz")
    return tmp_path


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def test_version_and_help_everywhere(capsys):
    assert main(["--version"]) == 0
    assert __version__ in capsys.readouterr().out
    for cmd in build_parser().commands:
        assert main([cmd, "--help"]) == 0
        assert "usage" in capsys.readouterr().out
        assert main([cmd, "--version"]) == 0
        assert __version__ in capsys.readouterr().out


def test_usage_errors(pair, capsys):
    assert main([]) == 2
    assert main(["register", "--moving", str(pair / "a.nii.gz"), "--out-dir", "x"]) == 2
    assert "usage" in capsys.readouterr().err
    assert main(["register", "--bogus"]) == 2
    assert main(["register", "--moving", "a", "--fixed", "b", "--out-dir", "c",
                 "--cascades", "0"]) == 2


def test_parse_grid():
    assert parse_grid("lambda=1e-4,1,2") == ("lambda", [1e-4, 1.0, 2.0])
    assert parse_grid("cascades=1..5") == ("cascades", [1, 2, 3, 4, 5])
    assert parse_grid("cascades=1,3") == ("cascades", [1, 3])
    for bad in ("lambda", "iters=1,2", "cascades=0..2", "lambda=a,b", "lambda=-1"):
        with pytest.raises(UsageError):
            parse_grid(bad)


# --------------------------------------------------------------------------
# register
# --------------------------------------------------------------------------

def test_register_self(pair, tmp_path):
    out = tmp_path / "reg"
    code = main(["register", "--moving", str(pair / "a.nii.gz"), "--fixed", str(pair / "a.nii.gz"),
                 "--out-dir", str(out), "--moving-labels", str(pair / "a_labels.nii.gz")] + FAST)
    assert code == 0
    for name in ("warped.nii.gz", "field.f32", "field.dims", "jacobian.csv", "loss_trace.csv",
                 "warped_labels.nii.gz"):
        assert (out / name).exists()
    jac = _csv(out / "jacobian.csv")
    assert jac[0] == ["folding_fraction", "min_det", "mean_det"]
    assert float(jac[1][0]) == 0.0
    trace = _csv(out / "loss_trace.csv")
    assert trace[0] == ["stage", "iter", "loss"] and len(trace) == 1 + 2 * 6
    np.testing.assert_array_equal(load_labels(out / "warped_labels.nii.gz").data,
                                  load_labels(pair / "a_labels.nii.gz").data)


def test_register_strategies_differ_and_are_deterministic(pair, tmp_path):
    def run(name, strategy):
        out = tmp_path / name
        assert main(["register", "--moving", str(pair / "b.nii.gz"), "--fixed",
                     str(pair / "a.nii.gz"), "--out-dir", str(out), "--strategy", strategy]
                    + FAST) == 0
        return out
    acc, acc2, suc = run("acc", "accumulate"), run("acc2", "accumulate"), run("suc", "successive")
    assert not np.array_equal(load_field(acc / "field.f32"), load_field(suc / "field.f32"))
    for name in ("warped.nii.gz", "field.f32", "jacobian.csv", "loss_trace.csv"):
        assert (acc / name).read_bytes() == (acc2 / name).read_bytes()


def test_register_rigid_init(pair, tmp_path):
    out = tmp_path / "rig"
    assert main(["register", "--moving", str(pair / "b.nii.gz"), "--fixed", str(pair / "a.nii.gz"),
                 "--out-dir", str(out), "--rigid-init"] + FAST) == 0
    assert len((out / "rigid.txt").read_text().split()) == 6


def test_register_io_errors(pair, tmp_path):
    assert main(["register", "--moving", str(tmp_path / "nope.nii"), "--fixed",
                 str(pair / "a.nii.gz"), "--out-dir", str(tmp_path / "o")] + FAST) == 3
    (tmp_path / "junk.nii").write_bytes(b"not a nifti file at all")
    assert main(["register", "--moving", str(tmp_path / "junk.nii"), "--fixed",
                 str(pair / "a.nii.gz"), "--out-dir", str(tmp_path / "o")] + FAST) == 3
    save_volume(np.zeros((8, 8, 8), np.float32), tmp_path / "small.nii")
    assert main(["register", "--moving", str(tmp_path / "small.nii"), "--fixed",
                 str(pair / "a.nii.gz"), "--out-dir", str(tmp_path / "o")] + FAST) == 2


def test_config_file(pair, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "casreg.cfg").write_text("lambda=0.5\ncascades=1\niters=3\n# comment\n")
    args = build_parser()
    from casreg.cli import _apply_config
    ns = _apply_config(args, ["register", "--moving", "a", "--fixed", "b", "--out-dir", "c"])
    assert ns.lam == 0.5 and ns.cascades == 1 and ns.iters == 3
    ns = _apply_config(build_parser(), ["register", "--moving", "a", "--fixed", "b",
                                        "--out-dir", "c", "--cascades", "4"])
    assert ns.cascades == 4
    (tmp_path / "casreg.cfg").write_text("nonsense=1\n")
    assert main(["register", "--moving", "a", "--fixed", "b", "--out-dir", "c"]) == 2
    (tmp_path / "casreg.cfg").write_text("strategy=compose\n")
    assert main(["register", "--moving", "a", "--fixed", "b", "--out-dir", "c"]) == 2


# --------------------------------------------------------------------------
# synth
# --------------------------------------------------------------------------

def test_synth_layout(synth_dir):
    bank = sorted(p.name for p in (synth_dir / "bank").iterdir())
    assert bank == ["atlas_0", "atlas_1", "atlas_2", "atlas_3"]
    for d in bank:
        meta = (synth_dir / "bank" / d / "meta.txt").read_text()
        assert meta.startswith("age=")
    target = synth_dir / "targets" / "target"
    assert {p.name for p in target.iterdir()} == {"image.nii.gz", "labels.nii.gz",
                                                   "gt_field.f32", "gt_field.dims", "meta.txt"}
    assert "source=atlas_" in (target / "meta.txt").read_text()
    assert jacobian_report(load_field(target / "gt_field.f32")).folding_fraction == 0.0


def test_synth_ten_atlases(tmp_path):
    assert main(["synth", "--out-dir", str(tmp_path), "--dims", "16", "--amplitude", "2",
                 "--smoothness", "3"]) == 0
    assert len([p for p in (tmp_path / "bank").iterdir() if p.is_dir()]) == 10
    assert len(list((tmp_path / "targets").iterdir())) == 1


def test_synth_deterministic(synth_dir, tmp_path):
    assert main(["synth", "--out-dir", str(tmp_path), "--seed", "3", "--dims", "20",
                 "--n-atlases", "4", "--amplitude", "2", "--smoothness", "3"]) == 0
    files = sorted(p.relative_to(synth_dir) for p in synth_dir.rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (tmp_path / rel).read_bytes() == (synth_dir / rel).read_bytes(), rel


def test_synth_bad_args(tmp_path):
    assert main(["synth", "--out-dir", str(tmp_path), "--n-labels", "12"]) == 2
    assert main(["synth", "--out-dir", str(tmp_path), "--dims", "8"]) == 2


# --------------------------------------------------------------------------
# segment
# --------------------------------------------------------------------------

def test_segment_oracle_atlas(synth_dir, tmp_path):
    bank = synth_dir / "bank"
    out = tmp_path / "seg" / "labels.nii.gz"
    target = bank / "atlas_2"
    assert main(["segment", "--target", str(target / "image.nii.gz"), "--bank", str(bank),
                 "--out", str(out), "--k", "1"] + FAST) == 0
    truth = load_labels(target / "labels.nii.gz").data
    assert dice(load_labels(out).data, truth, 1) >= 0.95
    rows = _csv(out.parent / "report.csv")
    assert rows[0] == ["kind", "atlas_id", "ncc", "selected", "seconds", "detail"]
    atlas_rows = [r for r in rows if r[0] == "atlas"]
    assert len(atlas_rows) == 4
    assert [r[1] for r in atlas_rows if r[3] == "1"] == ["atlas_2"]


def test_segment_k_too_large_and_fusion_equivalence(synth_dir, tmp_path):
    bank = synth_dir / "bank"
    target = synth_dir / "targets" / "target" / "image.nii.gz"
    maj = tmp_path / "maj" / "labels.nii.gz"
    lwv0 = tmp_path / "lwv0" / "labels.nii.gz"
    assert main(["segment", "--target", str(target), "--bank", str(bank), "--out", str(maj),
                 "--k", "10", "--fusion", "majority"] + FAST) == 0
    assert main(["segment", "--target", str(target), "--bank", str(bank), "--out", str(lwv0),
                 "--k", "10", "--fusion", "lwv", "--gain", "0"] + FAST) == 0
    assert maj.read_bytes() == lwv0.read_bytes()
    rows = _csv(maj.parent / "report.csv")
    warnings = [r for r in rows if r[0] == "warning"]
    assert warnings and "k=10" in warnings[0][5]
    assert sum(r[3] == "1" for r in rows if r[0] == "atlas") == 4


def test_segment_errors(synth_dir, tmp_path):
    target = synth_dir / "targets" / "target" / "image.nii.gz"
    assert main(["segment", "--target", str(target), "--bank", str(tmp_path / "none"),
                 "--out", str(tmp_path / "o.nii")] + FAST) == 3
    assert main(["segment", "--target", str(target), "--bank", str(synth_dir / "bank"),
                 "--out", str(tmp_path / "o.nii"), "--patch", "4"] + FAST) == 2
    flat_bank = tmp_path / "flat"
    lab = load_labels(synth_dir / "bank" / "atlas_0" / "labels.nii.gz").data
    save_atlas(flat_bank, Atlas(np.full(lab.shape, 0.5), lab, "flat"))
    assert main(["segment", "--target", str(target), "--bank", str(flat_bank),
                 "--out", str(tmp_path / "o.nii")] + FAST) == 5


# --------------------------------------------------------------------------
# eval and sweep
# --------------------------------------------------------------------------

def test_eval(tmp_path, capsys):
    a = np.zeros((4, 4, 4), np.uint8)
    a[0, 0, :4] = 1
    b = np.zeros((4, 4, 4), np.uint8)
    b[0, 0, 2:4] = 1
    b[1, 1, :4] = 1
    save_volume(a, tmp_path / "a.nii")
    save_volume(b, tmp_path / "b.nii")
    assert main(["eval", "--pred", str(tmp_path / "a.nii"), "--truth", str(tmp_path / "b.nii"),
                 "--labels", "1", "--out", str(tmp_path / "d.csv")]) == 0
    assert "label 1: 0.4000" in capsys.readouterr().out
    rows = _csv(tmp_path / "d.csv")
    assert rows[1] == ["1", "0.4"]
    assert main(["eval", "--pred", str(tmp_path / "a.nii"), "--truth", str(tmp_path / "a.nii"),
                 "--labels", "1"]) == 0
    assert "label 1: 1.0000" in capsys.readouterr().out
    c = np.zeros((4, 4, 4), np.uint8)
    c[3, 3, 3] = 1
    save_volume(c, tmp_path / "c.nii")
    assert main(["eval", "--pred", str(tmp_path / "a.nii"), "--truth", str(tmp_path / "c.nii"),
                 "--labels", "1"]) == 0
    assert "label 1: 0.0000" in capsys.readouterr().out
    save_volume(np.zeros((4, 4, 5), np.uint8), tmp_path / "e.nii")
    assert main(["eval", "--pred", str(tmp_path / "a.nii"), "--truth", str(tmp_path / "e.nii")]) == 2
    assert main(["eval", "--pred", str(tmp_path / "x.nii"), "--truth", str(tmp_path / "a.nii")]) == 3


def test_sweep(synth_dir, tmp_path, capsys):
    out = tmp_path / "sweep.csv"
    assert main(["sweep", "--bank", str(synth_dir / "bank"), "--out", str(out),
                 "--grid", "cascades=1..2", "--iters", "3", "--threads", "1"]) == 0
    rows = _csv(out)
    assert rows[0] == ["config_id", "target_id", "label", "dice", "folding", "seconds"]
    assert {r[0] for r in rows[1:]} == {"cascades=1", "cascades=2"}
    assert "cascades=2" in capsys.readouterr().out
    out2 = tmp_path / "targets.csv"
    assert main(["sweep", "--bank", str(synth_dir / "bank"), "--out", str(out2),
                 "--targets", str(synth_dir / "targets"), "--grid", "lambda=1,2"] + FAST) == 0
    assert {r[1] for r in _csv(out2)[1:]} == {"target"}
    assert main(["sweep", "--bank", str(synth_dir / "bank"), "--out", str(out),
                 "--grid", "iters=1,2"]) == 2


def test_console_script_entry_point():
    r = subprocess.run([sys.executable, "-m", "casreg.cli", "--version"], capture_output=True,
                       text=True)
    assert r.returncode == 0 and __version__ in r.stdout
