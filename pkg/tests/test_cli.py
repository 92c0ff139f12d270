import json

import pytest

from mono4d import fileio
from mono4d.cli import build_parser, main


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "scene"
    assert main(["synth", "--preset", "static", "--frames", "6", "--height", "24",
                 "--width", "32", "--grid", "6", "--out", str(out)]) == 0
    return out


def test_synth_writes_valid_manifest(synth_dir, capsys):
    _, problems = fileio.validate_manifest(synth_dir / "manifest.json")
    assert problems == []


def test_reconstruct_then_evaluate(synth_dir, tmp_path, capsys):
    out = tmp_path / "pred"
    assert main(["reconstruct", str(synth_dir), "--out", str(out), "--window", "3"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert {"shape", "flow", "track", "mask", "consistency", "total"} <= set(report)
    assert len(list(out.glob("cloud_*.pfm"))) == 6
    assert (out / "losses.json").is_file() and (out / "ply" / "frame_00005.ply").is_file()

    assert main(["eval-pcd", str(out), str(synth_dir)]) == 0
    text = capsys.readouterr().out
    metrics = json.loads(text[: text.rindex("}") + 1])
    assert metrics["cd_mm"] < 0.1 and metrics["f1"] == 100.0
    assert "CD(mm)" in text

    assert main(["eval-flow", str(out), str(synth_dir), "--grid", "6"]) == 0
    text = capsys.readouterr().out
    flow = json.loads(text[: text.rindex("}") + 1])
    assert flow["ade_mm"] < 0.1 and flow["p5"] == 100.0


def test_reconstruct_merged_ply(synth_dir, tmp_path):
    out = tmp_path / "pred"
    assert main(["reconstruct", str(synth_dir), "--out", str(out), "--merged",
                 "--color-by", "height"]) == 0
    assert [p.name for p in (out / "ply").iterdir()] == ["merged.ply"]


def test_refine_verbose_trace(synth_dir, tmp_path, capsys):
    out = tmp_path / "pred"
    assert main(["reconstruct", str(synth_dir), "--out", str(out), "--refine",
                 "--refine-iters", "2", "--verbose"]) == 0
    lines = capsys.readouterr().err.strip().splitlines()
    entries = [json.loads(line) for line in lines]
    assert entries[0]["iteration"] == 0 and "total" in entries[0]


@pytest.mark.parametrize("window, overlap", [("4", "4"), ("4", "5"), ("4", "0")])
def test_overlap_must_be_below_window(tmp_path, capsys, window, overlap):
    with pytest.raises(SystemExit) as info:
        main(["reconstruct", str(tmp_path / "missing"), "--out", str(tmp_path / "o"),
              "--window", window, "--overlap", overlap])
    assert info.value.code == 2
    err = capsys.readouterr().err
    assert err.startswith("error[usage]:") and "overlap" in err
    assert not (tmp_path / "o").exists()


def test_frame_count_mismatch_names_both_counts(synth_dir, tmp_path, capsys):
    other = tmp_path / "short"
    main(["synth", "--preset", "static", "--frames", "4", "--height", "24", "--width", "32",
          "--grid", "6", "--out", str(other)])
    pred = tmp_path / "pred"
    main(["reconstruct", str(other), "--out", str(pred)])
    capsys.readouterr()
    assert main(["eval-pcd", str(pred), str(synth_dir)]) == 1
    err = capsys.readouterr().err.strip()
    assert err.startswith("error[shape]:") and "4" in err and "6" in err
    assert len(err.splitlines()) == 1


def test_missing_manifest_is_one_line_error(tmp_path, capsys):
    assert main(["losses", str(tmp_path / "nope.json")]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error[") and len(err.strip().splitlines()) == 1


def test_losses_command(synth_dir, capsys):
    assert main(["losses", str(synth_dir / "manifest.json")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["total"] == pytest.approx(
        4 * report["shape"] + 5 * report["flow"] + 5 * report["track"] + report["mask"]
        + 0.005 * report["consistency"], abs=1e-12
    )
    assert report["flow"] < 1e-5


def test_help_shows_defaults(capsys):
    parser = build_parser()
    with pytest.raises(SystemExit):
        parser.parse_args(["reconstruct", "--help"])
    text = capsys.readouterr().out
    assert "default: 4" in text and "default: 1" in text and "default: 200" in text
