import csv
import json

import numpy as np
import pytest

from dfbscan import (
    ALL_INDICATORS,
    Attack,
    SynthSpec,
    build_profile,
    generate_benchmark,
    generate_model,
    save_final_layer,
    save_profile,
)
from dfbscan.cli import main

K, D = 8, 32


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Clean dir, backdoor dir with labels, a profile, and single models."""
    root = tmp_path_factory.mktemp("cli")
    clean_dir = root / "clean"
    backdoor_dir = root / "backdoor"
    clean_dir.mkdir()
    backdoor_dir.mkdir()
    # strength-6 mean boosts give a wide clean/backdoor similarity gap, so
    # exit-code assertions do not depend on borderline verdicts
    config, _ = generate_benchmark(
        SynthSpec(k=K, d=D, strength=6.0),
        counts=(16, 16),
        attacks=(Attack.MEAN_BOOST,),
        master_seed=21,
    )
    for i, p in enumerate(config.cleans):
        save_final_layer(p, clean_dir / f"clean_{i:03d}.dfbs")
    rows = []
    for i, (p, t) in enumerate(config.backdoors):
        name = f"bd_{i:03d}.dfbs"
        save_final_layer(p, backdoor_dir / name)
        rows.append((name, t))
    with open(backdoor_dir / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "target"])
        writer.writerows(rows)

    profile = build_profile(config, ALL_INDICATORS)
    profile_path = root / "profile.json"
    save_profile(profile, profile_path)

    clean_model = root / "one_clean.dfbs"
    save_final_layer(generate_model(SynthSpec(k=K, d=D, seed=4242)), clean_model)
    bad_model = root / "one_bad.dfbs"
    save_final_layer(
        generate_model(
            SynthSpec(k=K, d=D, attack=Attack.MEAN_BOOST, strength=4.0, target=5, seed=777)
        ),
        bad_model,
    )
    return root


class TestScan:
    def test_clean_exit_zero(self, workspace, capsys):
        code = main(
            ["scan", str(workspace / "one_clean.dfbs"), "--profile", str(workspace / "profile.json")]
        )
        doc = json.loads(capsys.readouterr().out)
        assert code == 0
        assert doc["is_backdoored"] is False
        assert doc["target_class"] is None

    def test_backdoored_exit_three(self, workspace, capsys):
        code = main(
            ["scan", str(workspace / "one_bad.dfbs"), "--profile", str(workspace / "profile.json")]
        )
        doc = json.loads(capsys.readouterr().out)
        assert code == 3
        assert doc["is_backdoored"] is True
        assert doc["target_class"] == 5
        assert doc["elapsed_us"] >= 0

    def test_missing_profile_is_usage_error(self, workspace, capsys):
        code = main(["scan", str(workspace / "one_clean.dfbs"), "--profile", "/nonexistent.json"])
        assert code == 1
        assert "error" in capsys.readouterr().err

    def test_corrupt_model_is_data_error(self, workspace, tmp_path, capsys):
        bad = tmp_path / "corrupt.dfbs"
        bad.write_bytes(b"DFBS\x01garbage")
        code = main(["scan", str(bad), "--profile", str(workspace / "profile.json")])
        assert code == 2

    def test_no_timing_golden_output(self, workspace, capsys):
        argv = [
            "scan", str(workspace / "one_clean.dfbs"),
            "--profile", str(workspace / "profile.json"), "--no-timing",
        ]
        main(argv)
        first = capsys.readouterr().out
        main(argv)
        second = capsys.readouterr().out
        assert first == second
        assert "elapsed_us" not in json.loads(first)

    def test_output_file(self, workspace, tmp_path, capsys):
        out = tmp_path / "report.json"
        code = main(
            [
                "scan", str(workspace / "one_bad.dfbs"),
                "--profile", str(workspace / "profile.json"),
                "--output", str(out),
            ]
        )
        assert code == 3
        assert capsys.readouterr().out == ""
        assert json.loads(out.read_text())["is_backdoored"] is True

    def test_human_format(self, workspace, capsys):
        code = main(
            [
                "scan", str(workspace / "one_bad.dfbs"),
                "--profile", str(workspace / "profile.json"), "--format", "human",
            ]
        )
        out = capsys.readouterr().out
        assert code == 3
        assert "BACKDOORED" in out and "target" in out


class TestScanBatch:
    def test_profile_batch(self, workspace, capsys):
        code = main(
            [
                "scan-batch", str(workspace / "backdoor"),
                "--profile", str(workspace / "profile.json"), "--jobs", "2",
            ]
        )
        doc = json.loads(capsys.readouterr().out)
        assert code == 3
        assert doc["models"] == 16
        assert doc["flagged"] >= 12
        paths = [r["path"] for r in doc["results"]]
        assert paths == sorted(paths)

    def test_empty_dir_usage_error(self, tmp_path, workspace):
        empty = tmp_path / "empty"
        empty.mkdir()
        code = main(["scan-batch", str(empty), "--profile", str(workspace / "profile.json")])
        assert code == 1

    def test_reference_free_flags_injected(self, workspace, tmp_path, capsys):
        batch = tmp_path / "mixed"
        batch.mkdir()
        for i in range(20):
            save_final_layer(
                generate_model(SynthSpec(k=10, d=64, seed=60_000 + i)), batch / f"m{i:03d}.dfbs"
            )
        save_final_layer(
            generate_model(
                SynthSpec(k=10, d=64, attack=Attack.MEAN_BOOST, strength=4.0, target=2, seed=61_000)
            ),
            batch / "zz_suspect.dfbs",
        )
        code = main(["scan-batch", str(batch), "--reference-free"])
        doc = json.loads(capsys.readouterr().out)
        assert code == 3
        flagged = [r["path"] for r in doc["results"] if r["flagged"]]
        assert flagged == [str(batch / "zz_suspect.dfbs")]

    def test_no_timing_batch_golden(self, workspace, capsys):
        argv = [
            "scan-batch", str(workspace / "clean"),
            "--profile", str(workspace / "profile.json"), "--no-timing",
        ]
        main(argv)
        first = capsys.readouterr().out
        main(argv)
        second = capsys.readouterr().out
        assert first == second
        assert "elapsed_us" not in first

    def test_csv_format(self, workspace, capsys):
        code = main(
            [
                "scan-batch", str(workspace / "backdoor"),
                "--profile", str(workspace / "profile.json"), "--format", "csv",
            ]
        )
        out = capsys.readouterr().out
        assert code == 3
        header = out.splitlines()[0]
        assert header.startswith("path,is_backdoored,similarity")

    def test_partial_failures_continue(self, workspace, tmp_path, capsys):
        mixed = tmp_path / "partial"
        mixed.mkdir()
        save_final_layer(generate_model(SynthSpec(k=K, d=D, seed=50)), mixed / "good.dfbs")
        (mixed / "bad.dfbs").write_bytes(b"DFBS\x01junk")
        code = main(
            ["scan-batch", str(mixed), "--profile", str(workspace / "profile.json")]
        )
        doc = json.loads(capsys.readouterr().out)
        assert code in (0, 3)  # batch completed despite the corrupt file
        assert doc["errors"] == 1
        assert any("error" in r for r in doc["results"])

    def test_all_failures_exit_two(self, workspace, tmp_path, capsys):
        broken = tmp_path / "broken"
        broken.mkdir()
        (broken / "a.dfbs").write_bytes(b"DFBS\x01junk")
        (broken / "b.dfbs").write_bytes(b"not even close")
        code = main(
            ["scan-batch", str(broken), "--profile", str(workspace / "profile.json")]
        )
        capsys.readouterr()
        assert code == 2

    def test_csv_batch_row_count(self, workspace, capsys):
        main(
            [
                "scan-batch", str(workspace / "clean"),
                "--profile", str(workspace / "profile.json"), "--format", "csv",
            ]
        )
        out = capsys.readouterr().out
        assert len(out.strip().splitlines()) == 1 + 16


class TestBatchThroughput:
    def test_hundred_model_batch_scan_time(self, tmp_path, capsys):
        # 100 models at K=43, D=512: summed detection time (file I/O excluded,
        # as timed by detect itself) stays under 2 s
        from dfbscan import ClueProfile, clean_reference

        batch = tmp_path / "big"
        batch.mkdir()
        for i in range(100):
            save_final_layer(
                generate_model(SynthSpec(k=43, d=512, seed=90_000 + i)),
                batch / f"m{i:03d}.dfbs",
            )
        cleans = [generate_model(SynthSpec(k=43, d=512, seed=91_000 + i)) for i in range(5)]
        profile = ClueProfile(
            indicator_ids=ALL_INDICATORS,
            lam=0.5,
            clean_reference=clean_reference(cleans, ALL_INDICATORS),
            k=43,
        )
        profile_path = tmp_path / "big_profile.json"
        save_profile(profile, profile_path)
        code = main(["scan-batch", str(batch), "--profile", str(profile_path)])
        doc = json.loads(capsys.readouterr().out)
        assert code in (0, 3)
        assert doc["models"] == 100 and doc["errors"] == 0
        total_us = sum(r["elapsed_us"] for r in doc["results"])
        assert total_us < 2_000_000


class TestCalibrate:
    def test_emits_valid_profile(self, workspace, tmp_path, capsys):
        out_path = tmp_path / "cal_profile.json"
        code = main(
            [
                "calibrate",
                "--clean", str(workspace / "clean"),
                "--backdoor", str(workspace / "backdoor"),
                "--output", str(out_path),
            ]
        )
        assert code == 0
        doc = json.loads(out_path.read_text())
        assert doc["version"] == 1
        assert doc["k"] == K
        assert len(doc["indicator_ids"]) == 62
        assert 0.0 <= doc["lambda"] <= 1.0
        assert len(doc["clean_reference"]) == K
        from dfbscan import load_profile

        load_profile(out_path)  # must round-trip through the strict loader

    def test_bad_ids_is_usage_error(self, workspace, tmp_path):
        code = main(
            [
                "calibrate",
                "--clean", str(workspace / "clean"),
                "--backdoor", str(workspace / "backdoor"),
                "--ids", "0,99",
            ]
        )
        assert code == 1

    def test_subset_ids(self, workspace, tmp_path):
        out_path = tmp_path / "subset_profile.json"
        code = main(
            [
                "calibrate",
                "--clean", str(workspace / "clean"),
                "--backdoor", str(workspace / "backdoor"),
                "--ids", "0,5,25,61",
                "--output", str(out_path),
            ]
        )
        assert code == 0
        doc = json.loads(out_path.read_text())
        assert doc["indicator_ids"] == [0, 5, 25, 61]


class TestSelect:
    @pytest.mark.parametrize("method,n", [("topk", 5), ("rfe", 5)])
    def test_fixed_size_methods(self, workspace, capsys, method, n):
        code = main(
            [
                "select",
                "--clean", str(workspace / "clean"),
                "--backdoor", str(workspace / "backdoor"),
                "--method", method, "--n", str(n),
            ]
        )
        doc = json.loads(capsys.readouterr().out)
        assert code == 0
        assert doc["method"] == method
        assert len(doc["chosen"]) == n
        assert doc["profile"]["indicator_ids"] == sorted(doc["chosen"])

    def test_acc_sweep(self, workspace, capsys, tmp_path):
        profile_out = tmp_path / "sel_profile.json"
        code = main(
            [
                "select",
                "--clean", str(workspace / "clean"),
                "--backdoor", str(workspace / "backdoor"),
                "--method", "acc", "--profile-out", str(profile_out),
            ]
        )
        doc = json.loads(capsys.readouterr().out)
        assert code == 0
        assert sorted(doc["ranking"]) == list(range(62))
        assert len(doc["f1_curve"]) == 62
        assert doc["f1"] == max(doc["f1_curve"])
        assert profile_out.exists()

    def test_topk_requires_n(self, workspace, capsys):
        code = main(
            [
                "select",
                "--clean", str(workspace / "clean"),
                "--backdoor", str(workspace / "backdoor"),
                "--method", "topk",
            ]
        )
        assert code == 1


class TestSynthCommand:
    def test_generate_writes_models_and_labels(self, tmp_path, capsys):
        out = tmp_path / "gen"
        code = main(
            [
                "synth", "generate", "--k", "6", "--d", "16", "--count", "8",
                "--attack", "mean_boost", "--target", "cycle", "--seed", "3",
                "--out", str(out),
            ]
        )
        assert code == 0
        files = sorted(out.glob("*.dfbs"))
        assert len(files) == 8
        with open(out / "labels.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [int(r["target"]) for r in rows] == [i % 6 for i in range(8)]

    def test_out_of_range_target_is_usage_error(self, tmp_path, capsys):
        code = main(
            [
                "synth", "generate", "--k", "4", "--d", "8", "--count", "2",
                "--attack", "mean_boost", "--target", "7", "--out", str(tmp_path / "x"),
            ]
        )
        assert code == 1

    def test_generate_deterministic(self, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            main(
                [
                    "synth", "generate", "--k", "4", "--d", "8", "--count", "3",
                    "--attack", "none", "--seed", "9", "--out", str(out),
                ]
            )
            outs.append(b"".join(p.read_bytes() for p in sorted(out.glob("*.dfbs"))))
        assert outs[0] == outs[1]


class TestIndicatorsCommand:
    def test_csv_dump_matches_hand_values(self, tmp_path, capsys, hand_params):
        model = tmp_path / "hand.dfbs"
        save_final_layer(hand_params, model)
        code = main(["indicators", "dump", str(model)])
        out = capsys.readouterr().out
        assert code == 0
        rows = list(csv.reader(out.strip().splitlines()))
        header, data = rows[0], rows[1:]
        assert len(header) == 62
        assert len(data) == 3
        wm = [float(r[header.index("weight_mean_raw")]) for r in data]
        swb = [float(r[header.index("weight_bias_sum_raw")]) for r in data]
        l2 = [float(r[header.index("weight_l2_raw")]) for r in data]
        assert wm == [1.0, 0.0, 0.0]
        assert swb == [4.0, 1.0, 0.0]
        assert l2 == [2.0, 0.0, 2.0]

    def test_json_dump_has_both_matrices(self, tmp_path, capsys, hand_params):
        model = tmp_path / "hand.dfbs"
        save_final_layer(hand_params, model)
        code = main(["indicators", "dump", str(model), "--format", "json"])
        doc = json.loads(capsys.readouterr().out)
        assert code == 0
        assert doc["k"] == 3
        assert len(doc["names"]) == 62
        assert np.array(doc["raw"]).shape == (3, 62)
        assert np.array(doc["normalized"]).shape == (3, 62)
        assert np.min(doc["normalized"]) >= 0 and np.max(doc["normalized"]) <= 1


class TestExitCodes:
    def test_unknown_command_usage(self, capsys):
        assert main(["frobnicate"]) == 1

    def test_missing_required_usage(self, capsys):
        assert main(["scan-batch"]) == 1

    def test_threads_env_override(self, workspace, capsys, monkeypatch):
        monkeypatch.setenv("DFBSCAN_THREADS", "1")
        code = main(
            [
                "scan-batch", str(workspace / "clean"),
                "--profile", str(workspace / "profile.json"),
            ]
        )
        capsys.readouterr()
        assert code == 0

    def test_bad_threads_env(self, workspace, capsys, monkeypatch):
        monkeypatch.setenv("DFBSCAN_THREADS", "soup")
        code = main(
            [
                "scan-batch", str(workspace / "clean"),
                "--profile", str(workspace / "profile.json"),
            ]
        )
        assert code == 1
