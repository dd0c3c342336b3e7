"""
Tests for the hybrid_render and denoise_planes command-line interfaces.
"""

import json
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np
import pytest

import denoise_planes
import hybrid_render
from dhr_shadows.gbuffer import dump_gbuffer
from dhr_shadows.metrics import FrameRow, RunRecord
from dhr_shadows.raytrace import AoBuffer, load_ao_plane, save_ao_plane

from conftest import plane_gbuffer
from run_tests import select_test_files


@pytest.fixture
def workdir():
    directory = tempfile.mkdtemp()
    yield directory
    shutil.rmtree(directory)


def test_print_config(capsys):
    assert hybrid_render.main(["--set", "ao.rays=16", "--print-config"]) == hybrid_render.EXIT_OK
    printed = json.loads(capsys.readouterr().out)
    assert printed["ao"]["rays"] == 16
    assert printed["shadows"]["mode"] == "soft"


def test_config_errors_exit_with_code_one(capsys):
    assert hybrid_render.main(["--set", "ao.rays=0", "sim"]) == hybrid_render.EXIT_CONFIG
    assert "ao.rays" in capsys.readouterr().out
    assert hybrid_render.main(["--config", "no_such_config.json", "sim"]) == hybrid_render.EXIT_CONFIG
    assert hybrid_render.main(["--set", "ao.rays", "sim"]) == hybrid_render.EXIT_CONFIG


def test_missing_command_prints_help():
    assert hybrid_render.main([]) == hybrid_render.EXIT_CONFIG


def test_unknown_suite_is_rejected_by_the_parser():
    with pytest.raises(SystemExit):
        hybrid_render.main(["suite", "warp-speed"])


def test_sim_writes_its_record(workdir, capsys):
    code = hybrid_render.main(["--set", "camera.width=32", "--set", "camera.height=18", "--set", "ao.rays=4",
                               "--set", "trajectory.ticks=4", "--set", f"output.directory={workdir}", "sim"])
    assert code == hybrid_render.EXIT_OK
    assert os.path.exists(os.path.join(workdir, "sim.csv"))
    assert os.path.exists(os.path.join(workdir, "sim_latency.svg"))
    record = RunRecord.read_csv(os.path.join(workdir, "sim.csv"))
    assert {r.pass_name for r in record.rows} == {"visibility", "ao"}
    assert "4 frames displayed" in capsys.readouterr().out


def test_report_summarizes_a_csv(workdir, capsys):
    path = os.path.join(workdir, "run.csv")
    RunRecord("run", [FrameRow(0, "ao", 100, 50, 1, True, 12.0, None),
                      FrameRow(1, "ao", 100, 70, 1, True, 14.0, 16.7)]).write_csv(path)
    assert hybrid_render.main(["report", path]) == hybrid_render.EXIT_OK
    out = capsys.readouterr().out
    assert "2/2 delivered" in out
    assert os.path.exists(os.path.join(workdir, "run_latency.svg"))


def test_denoise_planes_filters_a_sequence(workdir, capsys):
    gbuffer_files, ao_files = [], []
    rng = np.random.default_rng(0)
    for frame_id in range(3):
        gbuffer = plane_gbuffer(frame_id=frame_id)
        gbuffer_path = os.path.join(workdir, f"gbuffer_{frame_id}.bin")
        ao_path = os.path.join(workdir, f"ao_{frame_id}.bin")
        dump_gbuffer(gbuffer, gbuffer_path)
        counts = rng.integers(0, 9, size=gbuffer.shape).astype(np.uint8)
        save_ao_plane(AoBuffer(counts, 8, 1.0, gbuffer.pose), ao_path)
        gbuffer_files.append(gbuffer_path)
        ao_files.append(ao_path)

    output = os.path.join(workdir, "filtered")
    code = denoise_planes.main(["--gbuffer", *gbuffer_files, "--ao", *ao_files, "--output", output,
                                "--set", "camera.width=16", "--set", "camera.height=12",
                                "--set", "filter.iterations=2"])
    assert code == 0
    assert "Wrote 3 filtered planes" in capsys.readouterr().out
    filtered = load_ao_plane(os.path.join(output, "ao_2.bin"), plane_gbuffer(frame_id=2).pose)
    assert filtered.rays == 8
    assert filtered.counts.max() <= 8


def test_denoise_planes_errors(workdir):
    gbuffer_path = os.path.join(workdir, "gbuffer.bin")
    dump_gbuffer(plane_gbuffer(), gbuffer_path)
    # Mismatched file counts.
    assert denoise_planes.main(["-g", gbuffer_path, gbuffer_path, "-a", "ao.bin", "-o", workdir]) == 2
    # The default camera resolution does not match the 16x12 dump.
    ao_path = os.path.join(workdir, "ao.bin")
    save_ao_plane(AoBuffer(np.zeros((12, 16), dtype=np.uint8), 8, 1.0, plane_gbuffer().pose), ao_path)
    assert denoise_planes.main(["-g", gbuffer_path, "-a", ao_path, "-o", workdir]) == 2
    assert denoise_planes.main(["-g", "missing.bin", "-a", ao_path, "-o", workdir,
                                "-s", "camera.width=16", "-s", "camera.height=12"]) == 1


def test_runner_selects_modules_by_name():
    test_dir = Path(__file__).parent
    every = select_test_files(test_dir)
    assert test_dir / "test_cli.py" in every
    assert all(f.name.startswith("test_") for f in every)
    picked = select_test_files(test_dir, ["denoise", "test_transport.py"])
    assert [f.name for f in picked] == ["test_denoise.py", "test_transport.py"]
    assert select_test_files(test_dir, ["warp"]) == []
