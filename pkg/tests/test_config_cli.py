import numpy as np
import pytest

from sparsedeq import cli
from sparsedeq.classical import fbp
from sparsedeq.config import ConfigError, RunConfig, load_config
from sparsedeq.io import read_container, read_csv, write_csv
from sparsedeq.sampling import AngleMask
from sparsedeq.tomo import masked_forward
from sparsedeq.verify import VerificationReport

TINY = """\
# tiny end-to-end setting
geometry.n_pixels = 16
geometry.n_angles_total = 12
data.n_train = 3
data.n_val = 2
sampling.s = 4
denoiser.n_scales = 1
denoiser.channels = 4
train.n_epochs = 1
train.batch_size = 2
train.lr = 1e-3
tv.lambda = 0.01
tv.max_iters = 30
deq.fp_max_iter = 20
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


# -- config ---------------------------------------------------------------------

def test_defaults_round_trip():
    cfg = RunConfig.defaults()
    again = RunConfig.defaults()
    again.update_text(cfg.to_text())
    assert again.values == cfg.values


def test_later_lines_override(tmp_path):
    cfg = RunConfig.defaults()
    cfg.update_text("sampling.s = 5\nsampling.s = 7  # second wins\n")
    assert cfg.get("sampling.s") == 7


def test_file_then_overrides(tiny_cfg):
    cfg = load_config(tiny_cfg, ["sampling.s=6", "deq.gamma=0.5", "train.loss_kind=self,sup"])
    assert cfg.get("geometry.n_pixels") == 16 and cfg.get("sampling.s") == 6
    assert cfg.get("deq.gamma") == 0.5 and cfg.get("train.loss_kind") == ["self", "sup"]


@pytest.mark.parametrize("text,msg", [("geometry.n_pixel = 3", "unknown key"), ("geom.n_pixels = 3", "unknown section"),
                                      ("geometry.n_pixels = big", "cannot parse"), ("n_pixels = 3", "section.key"),
                                      ("geometry.n_pixels", "expected")])
def test_bad_lines_name_location(text, msg):
    with pytest.raises(ConfigError, match=msg) as err:
        RunConfig.defaults().update_text("# ok\n" + text, "run.cfg")
    assert "run.cfg:2" in str(err.value)


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/config.txt")


def test_typed_views(tiny_cfg):
    cfg = load_config(tiny_cfg)
    assert cfg.geometry().n_pixels == 16
    assert cfg.denoiser().image_side == 16
    assert cfg.deq().s_ref == 4
    assert cfg.train("sup").loss_kind == "sup"
    assert cfg.tv().lambda_ == 0.01
    auto = RunConfig.defaults()
    with pytest.raises(ConfigError):
        auto.tv()
    assert auto.tv(0.2).lambda_ == 0.2


def test_optional_values():
    cfg = load_config(None, ["geometry.n_detectors=none", "train.averaging=ema", "deq.anderson=off"])
    assert cfg.get("geometry.n_detectors") is None and cfg.get("train.averaging") == "ema"
    assert cfg.get("deq.anderson") is False


def test_workers_resolution(monkeypatch):
    cfg = RunConfig.defaults()
    monkeypatch.delenv("TSDQ_WORKERS", raising=False)
    assert cli.resolve_workers(None, cfg) == 1
    monkeypatch.setenv("TSDQ_WORKERS", "3")
    assert cli.resolve_workers(None, cfg) == 3
    assert cli.resolve_workers(2, cfg) == 2
    monkeypatch.setenv("TSDQ_WORKERS", "many")
    with pytest.raises(ConfigError):
        cli.resolve_workers(None, cfg)


# -- commands -------------------------------------------------------------------

@pytest.fixture
def sim(tiny_cfg, tmp_path):
    out = tmp_path / "sim"
    assert run("simulate", "--config", tiny_cfg, "--out", out) == 0
    return out


def test_simulate_manifest(sim):
    rows = read_csv(sim / "manifest.csv")
    assert len(rows) == 5 and [r["split"] for r in rows] == ["train"] * 3 + ["val"] * 2
    assert (sim / "config.resolved.txt").is_file()


def test_simulate_noiseless_is_exact(tiny_cfg, tmp_path):
    out = tmp_path / "clean"
    assert run("simulate", "--config", tiny_cfg, "--set", "noise.relative_level=0", "--out", out) == 0
    cfg = load_config(tiny_cfg)
    g = cfg.geometry()
    for r in read_csv(out / "manifest.csv"):
        x = read_container(out / r["phantom"]).data
        y = read_container(out / r["measurement"]).data
        mask = AngleMask.from_string(r["mask"], 12)
        np.testing.assert_array_equal(y, masked_forward(x, mask, g))


def test_simulate_reproducible(tiny_cfg, tmp_path, sim):
    again = tmp_path / "again"
    run("simulate", "--config", tiny_cfg, "--out", again)
    for f in sorted(p.name for p in sim.iterdir()):
        assert (sim / f).read_bytes() == (again / f).read_bytes()


def test_reconstruct_fbp_matches_library(tiny_cfg, sim, tmp_path):
    out = tmp_path / "fbp"
    assert run("reconstruct", "--config", tiny_cfg, "--method", "fbp", "--in", sim, "--out", out, "--pgm") == 0
    g = load_config(tiny_cfg).geometry()
    rows = read_csv(out / "metrics.csv")
    assert list(rows[0]) == ["id", "method", "s", "psnr", "ssim"] and len(rows) == 2
    for r in read_csv(sim / "manifest.csv")[3:]:
        y = read_container(sim / r["measurement"]).data
        direct = fbp(y, AngleMask.from_string(r["mask"], 12), g)
        got = read_container(out / f"recon_{int(r['id']):03d}.tsdq").data
        assert got.tobytes() == direct.tobytes()
    assert (out / "recon_003.pgm").is_file()


def test_reconstruct_tv(tiny_cfg, sim, tmp_path):
    out = tmp_path / "tv"
    assert run("reconstruct", "--config", tiny_cfg, "--method", "tv", "--in", sim, "--out", out) == 0
    assert len(read_csv(out / "metrics.csv")) == 2


def test_reconstruct_deq_needs_checkpoint(tiny_cfg, sim, tmp_path, capsys):
    assert run("reconstruct", "--config", tiny_cfg, "--method", "deq", "--in", sim, "--out", tmp_path / "d") == 1
    assert "checkpoint" in capsys.readouterr().err


def test_reconstruct_without_simulation(tiny_cfg, tmp_path):
    assert run("reconstruct", "--config", tiny_cfg, "--method", "fbp", "--in", tmp_path, "--out", tmp_path / "o") == 1


def test_train_smoke_and_deq_reconstruct(tiny_cfg, sim, tmp_path):
    out = tmp_path / "train"
    assert run("train", "--config", tiny_cfg, "--out", out, "--quiet") == 0
    hist = read_csv(out / "self" / "history.csv")
    assert [h["epoch"] for h in hist] == ["1"]
    rec = tmp_path / "deq"
    assert run("reconstruct", "--config", tiny_cfg, "--method", "deq", "--checkpoint", out / "self" / "model.tsdn",
               "--in", sim, "--out", rec) == 0
    rows = read_csv(rec / "metrics.csv")
    assert float(rows[0]["psnr"]) > 0 and rows[0]["method"] == "deq"


def test_train_loss_sweep(tiny_cfg, tmp_path):
    out = tmp_path / "sweep"
    assert run("train", "--config", tiny_cfg, "--set", "train.loss_kind=self,sup,sup-plain", "--out", out,
               "--quiet") == 0
    for kind in ("self", "sup", "sup-plain"):
        assert (out / kind / "history.csv").is_file()


def test_train_resume_continues_numbering(tiny_cfg, tmp_path):
    out = tmp_path / "res"
    assert run("train", "--config", tiny_cfg, "--out", out, "--quiet") == 0
    assert run("train", "--config", tiny_cfg, "--set", "train.n_epochs=2", "--out", out, "--resume", "--quiet") == 0
    assert [h["epoch"] for h in read_csv(out / "self" / "history.csv")] == ["1", "2"]
    full = tmp_path / "full"
    run("train", "--config", tiny_cfg, "--set", "train.n_epochs=2", "--out", full, "--quiet")
    assert (out / "self" / "history.csv").read_text() == (full / "self" / "history.csv").read_text()


def test_verify_exit_codes(tmp_path, monkeypatch):
    bad = [VerificationReport("prop1", "exact", 1.0, 1.0, 1e-12, name="prop1")]
    monkeypatch.setattr(cli, "verification_suite", lambda seed, cfg: bad)
    assert run("verify", "--out", tmp_path) == 2
    assert "[FAIL]" in (tmp_path / "reports.txt").read_text()


def test_verify_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    args = ["--set", "verify.thm1_seeds=1", "--set", "verify.mc_reps=3", "--set", "verify.prop2_draws=10000"]
    code_a = run("verify", *args, "--out", a)
    code_b = run("verify", *args, "--out", b)
    assert code_a == code_b
    assert (a / "reports.csv").read_bytes() == (b / "reports.csv").read_bytes()


def test_evaluate_averages(tmp_path):
    d1, d2 = tmp_path / "r1", tmp_path / "r2"
    d1.mkdir()
    d2.mkdir()
    write_csv(d1 / "metrics.csv", ["id", "method", "s", "psnr", "ssim"], [[0, "tv", 12, 20.0, 0.5], [1, "tv", 12, 22.5, 0.7]])
    write_csv(d2 / "metrics.csv", ["id", "method", "s", "psnr", "ssim"], [[0, "fbp", 20, 18.25, 0.4], [0, "fbp", 12, 17.0, 0.3]])
    assert run("evaluate", d1, d2, "--out", tmp_path / "sum") == 0
    rows = read_csv(tmp_path / "sum" / "summary.csv")
    assert [(r["method"], r["s"]) for r in rows] == [("fbp", "12"), ("fbp", "20"), ("tv", "12")]
    assert abs(float(rows[2]["psnr"]) - 21.25) <= 1e-12 and abs(float(rows[2]["ssim"]) - 0.6) <= 1e-12


def test_evaluate_empty_dir(tmp_path):
    (tmp_path / "empty").mkdir()
    assert run("evaluate", tmp_path / "empty", "--out", tmp_path / "o") == 1


def test_usage_errors(tmp_path):
    assert run("bogus", "--out", tmp_path) == 1
    assert run("simulate") == 1
    assert run("simulate", "--out", tmp_path, "--set", "nosuch.key=1") == 1
    assert run("simulate", "--out", tmp_path, "--workers", "0") == 1
