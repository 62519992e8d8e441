"""Serialization and the CLI: dumps, world dirs, images, configs, reports."""

import json
import os
import shutil
import tempfile
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from boxmia.canvas import Accumulation, BoxMode, Canvas, CanvasConfig, Transform
from boxmia.cli import main as cli_main
from boxmia.core import (
    BBox,
    DetectionSet,
    MembershipLabel,
    MembershipRecord,
    ScoredBox,
    SeededRng,
    Source,
)
from boxmia.formats import (
    ConfigError,
    DefensePlan,
    DumpFormatError,
    DumpVersionError,
    ImageFormat,
    RunConfig,
    config_from_dict,
    config_to_dict,
    export_canvas,
    import_canvas,
    load_config,
    load_dump,
    load_records_dir,
    load_world,
    metrics_to_dict,
    save_config,
    save_dump,
    save_world,
    write_report,
)
from boxmia.learners import CnnSpec, GbtSpec, TrainConfig
from boxmia.pipeline import (
    AttackExperiment,
    AttackKind,
    AttackMetrics,
    DefenseKind,
    DefenseSpec,
    SurrogateTaskConfig,
)
from boxmia.privacy import PrivacyParams, privacy_loss
from boxmia.simulator import generate_world, leaky_preset

WORLD_FILES = ("target_in", "target_out", "shadow_in", "shadow_out")


def det(i, class_id=None):
    return DetectionSet(
        image_id=f"img-{i:03d}",
        width=640.0,
        height=480.0,
        boxes=(
            ScoredBox(box=BBox(10.0, 20.0, 110.0, 220.0), score=0.9, class_id=class_id),
            ScoredBox(box=BBox(5.5, 6.5, 7.5, 8.5), score=0.125),
        ),
        meta={"not": "serialized"},
    )


def records(n, label=MembershipLabel.IN, source=Source.SHADOW):
    return [
        MembershipRecord(detections=det(i, class_id=3), label=label, source=source)
        for i in range(n)
    ]


def small_world(n=3, seed=0):
    sim = replace(leaky_preset(), objects_per_image=(1, 1), proposals_per_object=(4, 6))
    return generate_world(sim, n, seed)


# -- detection dumps -------------------------------------------------------


def test_dump_round_trips_membership_records(tmp_path):
    recs = records(3)
    path = str(tmp_path / "r.json")
    save_dump(recs, path)
    assert load_dump(path) == recs


def test_dump_round_trips_plain_detection_sets(tmp_path):
    sets = [det(0), det(1)]
    path = str(tmp_path / "p.json")
    save_dump(sets, path)
    loaded = load_dump(path)
    assert loaded == sets
    assert all(not isinstance(s, MembershipRecord) for s in loaded)


def test_dump_bytes_are_deterministic(tmp_path):
    a, b = str(tmp_path / "a.json"), str(tmp_path / "b.json")
    save_dump(records(2), a)
    save_dump(records(2), b)
    raw = open(a, "rb").read()
    assert raw == open(b, "rb").read()
    assert raw.endswith(b"\n")


def test_dump_rejects_empty():
    with pytest.raises(ValueError, match="empty dump"):
        save_dump([], "/dev/null")


def test_dump_rejects_mixed_groups(tmp_path):
    mixed = records(1, MembershipLabel.IN) + records(1, MembershipLabel.OUT)
    with pytest.raises(ValueError, match="one \\(label, source\\) group"):
        save_dump(mixed, str(tmp_path / "m.json"))


@st.composite
def detection_sets(draw):
    coords = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False, width=64)
    boxes = []
    for _ in range(draw(st.integers(min_value=0, max_value=4))):
        x0, x1 = sorted((draw(coords), draw(coords)))
        y0, y1 = sorted((draw(coords), draw(coords)))
        boxes.append(
            ScoredBox(
                box=BBox(x0, y0, x1, y1),
                score=draw(st.floats(min_value=0.0, max_value=1.0, allow_nan=False)),
                class_id=draw(st.one_of(st.none(), st.integers(min_value=0, max_value=99))),
            )
        )
    return DetectionSet(
        image_id=draw(st.text(alphabet="abc-123", min_size=1, max_size=8)),
        width=draw(st.floats(min_value=1.0, max_value=1e4, allow_nan=False)),
        height=draw(st.floats(min_value=1.0, max_value=1e4, allow_nan=False)),
        boxes=tuple(boxes),
    )


@given(st.lists(detection_sets(), min_size=1, max_size=3))
@settings(max_examples=25, deadline=None)
def test_dump_round_trip_preserves_floats(sets):
    # Shortest-roundtrip repr in JSON must reproduce every double bit for bit.
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "x.json")
        save_dump(sets, path)
        assert load_dump(path) == sets


def _doc_with(tmp_path, mutate):
    base = str(tmp_path / "base.json")
    save_dump([det(0)], base)
    doc = json.load(open(base))
    mutate(doc)
    path = str(tmp_path / "doc.json")
    json.dump(doc, open(path, "w"))
    return path


BAD_DOCS = [
    (
        "bbox-wrong-arity",
        lambda d: d["images"][0]["detections"][0].update(bbox=[1, 2, 3]),
        DumpFormatError,
        r"\$\.images\[0\]\.detections\[0\]\.bbox: expected 4 numbers",
    ),
    (
        "bbox-bool-element",
        lambda d: d["images"][0]["detections"][0].update(bbox=[True, 2, 3, 4]),
        DumpFormatError,
        r"\$\.images\[0\]\.detections\[0\]\.bbox: expected 4 numbers",
    ),
    (
        "score-out-of-range",
        lambda d: d["images"][0]["detections"][0].update(score=1.5),
        DumpFormatError,
        r"\$\.images\[0\]\.detections\[0\]\.score: 1\.5 outside",
    ),
    (
        "class-id-float",
        lambda d: d["images"][0]["detections"][0].update(class_id=1.5),
        DumpFormatError,
        r"\$\.images\[0\]\.detections\[0\]\.class_id: expected integer",
    ),
    (
        "width-bool",
        lambda d: d["images"][0].update(width=True),
        DumpFormatError,
        r"\$\.images\[0\]\.width: expected number, got bool",
    ),
    (
        "image-not-object",
        lambda d: d["images"].__setitem__(0, [1]),
        DumpFormatError,
        r"\$\.images\[0\]: expected object, got list",
    ),
    (
        "corners-unordered",
        lambda d: d["images"][0]["detections"][0].update(bbox=[5, 5, 1, 1]),
        DumpFormatError,
        r"\$\.images\[0\]\.detections\[0\]: BBox corners",
    ),
    (
        "missing-version",
        lambda d: d.pop("version"),
        DumpFormatError,
        r"\$\.version: missing required field",
    ),
    (
        "missing-images",
        lambda d: d.pop("images"),
        DumpFormatError,
        r"\$\.images: missing required field",
    ),
    (
        "unknown-version",
        lambda d: d.update(version="2"),
        DumpVersionError,
        r"\$\.version: unknown dump version '2'",
    ),
    (
        "membership-without-split",
        lambda d: d.update(provenance={"membership": "in"}),
        DumpFormatError,
        r"membership and split must be given together",
    ),
    (
        "unknown-membership",
        lambda d: d.update(provenance={"membership": "maybe", "split": "shadow"}),
        DumpFormatError,
        r"\$\.provenance\.membership: unknown value 'maybe'",
    ),
    (
        "unknown-split",
        lambda d: d.update(provenance={"membership": "in", "split": "elsewhere"}),
        DumpFormatError,
        r"\$\.provenance\.split: unknown value 'elsewhere'",
    ),
]


@pytest.mark.parametrize(
    "mutate, exc, match",
    [case[1:] for case in BAD_DOCS],
    ids=[case[0] for case in BAD_DOCS],
)
def test_load_names_offending_json_path(tmp_path, mutate, exc, match):
    path = _doc_with(tmp_path, mutate)
    with pytest.raises(exc, match=match):
        load_dump(path)


def test_version_error_is_a_format_error():
    assert issubclass(DumpVersionError, DumpFormatError)
    assert issubclass(DumpFormatError, ValueError)


def test_load_rejects_invalid_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{nope")
    with pytest.raises(DumpFormatError, match="not valid JSON"):
        load_dump(str(path))


def test_load_rejects_non_object_top_level(tmp_path):
    path = tmp_path / "list.json"
    path.write_text("[1]")
    with pytest.raises(DumpFormatError, match=r"\$: expected top-level object"):
        load_dump(str(path))


def test_load_warns_on_unknown_keys_but_succeeds(tmp_path):
    def mutate(d):
        d["extra"] = 1
        d["images"][0]["zzz"] = 2

    path = _doc_with(tmp_path, mutate)
    with pytest.warns(UserWarning) as caught:
        loaded = load_dump(path)
    messages = sorted(str(w.message) for w in caught)
    assert messages == [
        "ignoring unknown dump key $.extra",
        "ignoring unknown dump key $.images[0].zzz",
    ]
    assert loaded == [det(0)]


# -- world directories -----------------------------------------------------


def test_world_round_trip(tmp_path):
    world = small_world()
    paths = save_world(world, str(tmp_path / "w"))
    assert [os.path.basename(p) for p in paths] == [f"{n}.json" for n in WORLD_FILES]
    assert load_world(str(tmp_path / "w")) == world


def test_world_rejects_provenance_mismatch(tmp_path):
    d = str(tmp_path / "w")
    save_world(small_world(), d)
    shutil.copy(os.path.join(d, "target_in.json"), os.path.join(d, "target_out.json"))
    with pytest.raises(DumpFormatError, match="does not match file name target_out"):
        load_world(d)


def test_world_requires_all_four_files(tmp_path):
    d = str(tmp_path / "w")
    save_world(small_world(), d)
    os.remove(os.path.join(d, "shadow_in.json"))
    with pytest.raises(FileNotFoundError, match="missing shadow_in.json"):
        load_world(d)


def test_world_rejects_plain_dumps(tmp_path):
    d = str(tmp_path / "w")
    save_world(small_world(), d)
    save_dump([det(0)], os.path.join(d, "target_in.json"))
    with pytest.raises(DumpFormatError, match="need membership provenance"):
        load_world(d)


def test_records_dir_is_sorted_and_filtered(tmp_path):
    d = str(tmp_path / "w")
    world = small_world()
    save_world(world, d)
    (tmp_path / "w" / "notes.txt").write_text("ignored")

    # Sorted file names put both shadow dumps before both target dumps.
    all_recs = load_records_dir(d)
    assert len(all_recs) == 12
    assert [r.detections.image_id for r in all_recs[:3]] == [
        f"shadow_in-{i:05d}" for i in range(3)
    ]
    assert all(r.source is Source.SHADOW for r in all_recs[:6])
    assert all(r.source is Source.TARGET for r in all_recs[6:])

    shadow_only = load_records_dir(d, Source.SHADOW)
    assert len(shadow_only) == 6
    assert all(r.source is Source.SHADOW for r in shadow_only)


def test_records_dir_rejects_plain_dumps(tmp_path):
    save_dump([det(0)], str(tmp_path / "plain.json"))
    with pytest.raises(DumpFormatError, match="lacks membership provenance"):
        load_records_dir(str(tmp_path))


# -- canvas images ---------------------------------------------------------


def test_pgm_golden_bytes(tmp_path):
    """The on-disk encoding is pinned: header, big-endian codes, sidecar."""
    canvas = Canvas(size=2, pixels=np.array([[0.0, 0.5], [1.0, 0.25]]))
    path = str(tmp_path / "c.pgm")
    scale = export_canvas(canvas, path)
    assert scale == 65535.0
    # rint rounds 32767.5 up to the even code 32768.
    expected = b"P5\n2 2\n65535\n" + b"\x00\x00\x80\x00\xff\xff\x40\x00"
    assert open(path, "rb").read() == expected
    assert open(path + ".json", "rb").read() == b'{"scale":65535.0,"size":2}\n'


def test_pgm_round_trip_within_quantization(tmp_path):
    pixels = SeededRng(42).uniform_array(256, high=3.0).reshape(16, 16)
    canvas = Canvas(size=16, pixels=pixels)
    path = str(tmp_path / "c.pgm")
    scale = export_canvas(canvas, path)
    back, read_scale = import_canvas(path)
    assert read_scale == scale
    assert np.abs(back - pixels).max() <= 0.5 / scale + 1e-15


def test_png_round_trip_carries_scale(tmp_path):
    pixels = SeededRng(7).uniform_array(64, high=0.2).reshape(8, 8)
    canvas = Canvas(size=8, pixels=pixels)
    path = str(tmp_path / "c.png")
    scale = export_canvas(canvas, path)
    back, read_scale = import_canvas(path)
    assert read_scale == scale
    assert np.abs(back - pixels).max() <= 0.5 / scale + 1e-15


def test_empty_canvas_exports_with_unit_scale(tmp_path):
    path = str(tmp_path / "zero.pgm")
    assert export_canvas(Canvas(size=3, pixels=np.zeros((3, 3))), path) == 1.0
    back, scale = import_canvas(path)
    assert scale == 1.0
    assert (back == 0.0).all()


def test_export_rejects_negative_intensities(tmp_path):
    canvas = Canvas(size=1, pixels=np.array([[-0.1]]))
    with pytest.raises(ValueError, match="non-negative"):
        export_canvas(canvas, str(tmp_path / "n.pgm"))


def test_format_inference_and_override(tmp_path):
    canvas = Canvas(size=2, pixels=np.eye(2))
    with pytest.raises(ValueError, match="cannot infer image format"):
        export_canvas(canvas, str(tmp_path / "c.xyz"))
    # An explicit format wins over the extension.
    path = str(tmp_path / "weird.dat")
    export_canvas(canvas, path, ImageFormat.PGM)
    back, _ = import_canvas(path, ImageFormat.PGM)
    assert back.shape == (2, 2)


def test_import_rejects_malformed_pgm(tmp_path):
    p4 = tmp_path / "bad.pgm"
    p4.write_bytes(b"P4\n2 2\n65535\n" + b"\x00" * 8)
    with pytest.raises(ValueError, match="not a P5 PGM"):
        import_canvas(str(p4))

    eight_bit = tmp_path / "eight.pgm"
    eight_bit.write_bytes(b"P5\n2 2\n255\n" + b"\x00" * 4)
    with pytest.raises(ValueError, match="16-bit"):
        import_canvas(str(eight_bit))

    garbled = tmp_path / "garbled.pgm"
    garbled.write_bytes(b"P5\nx y\n65535\n" + b"\x00" * 8)
    with pytest.raises(ValueError, match="malformed PGM header"):
        import_canvas(str(garbled))


def test_png_without_scale_chunk_rejected(tmp_path):
    path = str(tmp_path / "plain.png")
    Image.fromarray(np.zeros((3, 3), dtype=np.uint16)).save(path, format="PNG")
    with pytest.raises(ValueError, match="boxmia-scale"):
        import_canvas(str(path))


# -- config files ----------------------------------------------------------


def full_config():
    sim = replace(leaky_preset(), objects_per_image=(1, 2), proposals_per_object=(4, 8))
    exp = AttackExperiment(
        kind=AttackKind.GBT_VECTOR,
        canvas_cfg=CanvasConfig(
            size=16,
            box_mode=BoxMode.ORIGINAL,
            rescale_scores=False,
            accumulation=Accumulation.SUM,
        ),
        augmentations=(Transform.HFLIP, Transform.ROT90),
        gbt_spec=GbtSpec(max_depth=3, n_estimators=20),
        n_max=20,
        seed=11,
    )
    plan = DefensePlan(
        rows=(
            DefenseSpec(kind=DefenseKind.NONE),
            DefenseSpec(kind=DefenseKind.DROPOUT, dropout_rate=0.5),
            DefenseSpec(
                kind=DefenseKind.DP,
                privacy=PrivacyParams(noise_scale=2.0, clip_bound=1.0, epochs=5.0),
            ),
        ),
        task=SurrogateTaskConfig(input_dim=12, n_per_split=24, n_test=24, label_noise=0.1),
        train=TrainConfig(learning_rate=0.1, epochs=5, batch_size=8),
    )
    return RunConfig(
        seed=7,
        n_per_split=30,
        simulator=sim,
        shadow_simulator=leaky_preset(),
        experiment=exp,
        sweep_levels=(0.0, 0.5, 1.0),
        defense=plan,
    )


def test_empty_config_gives_defaults(tmp_path):
    path = tmp_path / "empty.yaml"
    path.write_text("")
    assert load_config(str(path)) == RunConfig()
    assert config_from_dict({}) == RunConfig()


def test_config_defaults():
    cfg = RunConfig()
    assert cfg.seed == 0
    assert cfg.n_per_split == 100
    assert cfg.simulator == leaky_preset()
    assert cfg.shadow_simulator is None
    assert cfg.sweep_levels == (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
    assert cfg.defense is None


def test_config_round_trip_through_file(tmp_path):
    cfg = full_config()
    path = str(tmp_path / "run.yaml")
    save_config(cfg, path)
    assert load_config(path) == cfg


def test_config_round_trip_through_dict():
    cfg = full_config()
    assert config_from_dict(config_to_dict(cfg)) == cfg


BAD_CONFIGS = [
    (
        "unknown-keys-sorted",
        {"simulator": {"bogus": 1, "aardvark": 2}},
        r"\$\.simulator: unknown key\(s\) aardvark, bogus",
    ),
    ("bool-is-not-int", {"seed": True}, r"\$\.seed: expected integer, got True"),
    ("float-is-not-int", {"n_per_split": 3.5}, r"\$\.n_per_split: expected integer"),
    (
        "bad-enum",
        {"experiment": {"kind": "nope"}},
        r"\$\.experiment\.kind: expected one of 'canvas_cnn', 'gbt_vector', got 'nope'",
    ),
    (
        "bad-pair",
        {"simulator": {"objects_per_image": [1, 2, 3]}},
        r"\$\.simulator\.objects_per_image: expected a pair",
    ),
    ("bad-list", {"sweep_levels": "abc"}, r"\$\.sweep_levels: expected a list"),
    (
        "constructor-error-named",
        {"simulator": {"overfit_level": 2.0}},
        r"\$\.simulator: overfit_level",
    ),
    (
        "empty-defense-plan",
        {"defense": {"rows": []}},
        r"\$\.defense: defense plan needs at least one row",
    ),
]


@pytest.mark.parametrize(
    "data, match",
    [case[1:] for case in BAD_CONFIGS],
    ids=[case[0] for case in BAD_CONFIGS],
)
def test_config_errors_name_key_path(data, match):
    with pytest.raises(ConfigError, match=match):
        config_from_dict(data)


def test_config_rejects_non_mapping_file(tmp_path):
    path = tmp_path / "list.yaml"
    path.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError, match="top level must be a mapping"):
        load_config(str(path))


def test_config_rejects_invalid_yaml(tmp_path):
    path = tmp_path / "broken.yaml"
    path.write_text("a: [1, 2\n")
    with pytest.raises(ConfigError, match="not valid YAML"):
        load_config(str(path))


def test_defense_plan_requires_rows():
    with pytest.raises(ValueError, match="at least one row"):
        DefensePlan(rows=())


# -- reports ---------------------------------------------------------------


def test_metrics_dict_fields():
    m = AttackMetrics.from_counts(tp=7, fn=3, fp=2, tn=8)
    assert metrics_to_dict(m) == {
        "tp": 7,
        "fn": 3,
        "fp": 2,
        "tn": 8,
        "accuracy": 0.75,
        "recall_in": 0.7,
        "recall_out": 0.8,
        "average_recall": 0.75,
    }


def test_report_bytes_are_deterministic_and_sorted(tmp_path):
    payload = {"zeta": 1, "alpha": {"b": 2, "a": [1, 2]}}
    a, b = str(tmp_path / "a.json"), str(tmp_path / "b.json")
    write_report(payload, a)
    write_report(payload, b)
    raw = open(a, "rb").read()
    assert raw == open(b, "rb").read()
    assert raw.endswith(b"\n")
    assert raw.index(b"alpha") < raw.index(b"zeta")
    assert json.loads(raw) == payload


def test_report_spells_out_infinities(tmp_path):
    path = str(tmp_path / "inf.json")
    write_report({"rows": [{"eps": float("inf")}, {"eps": float("-inf")}], "v": 1.5}, path)
    doc = json.load(open(path))
    assert doc["rows"][0]["eps"] == "inf"
    assert doc["rows"][1]["eps"] == "-inf"
    assert doc["v"] == 1.5


def test_report_rejects_nan(tmp_path):
    with pytest.raises(ValueError):
        write_report({"v": float("nan")}, str(tmp_path / "nan.json"))


# -- command line ----------------------------------------------------------


def desk_run_config():
    """One small config that drives every subcommand in well under a second."""
    cfg = full_config()
    return replace(cfg, seed=3, shadow_simulator=None, sweep_levels=(0.0, 1.0))


@pytest.fixture(scope="module")
def cli_env(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = str(root / "run.yaml")
    save_config(desk_run_config(), config)
    world = str(root / "world")
    assert cli_main(["simulate", "--config", config, "--out", world]) == 0
    return {"root": root, "config": config, "world": world}


def test_cli_simulate_prints_the_four_dump_paths(cli_env, tmp_path, capsys):
    out_dir = str(tmp_path / "w")
    assert cli_main(["simulate", "--config", cli_env["config"], "--out", out_dir]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines == [os.path.join(out_dir, f"{n}.json") for n in WORLD_FILES]
    world = load_world(out_dir)
    assert len(world.target_in) == 30


def test_cli_simulate_rerun_is_byte_identical(cli_env, tmp_path):
    out_dir = str(tmp_path / "w")
    assert cli_main(["simulate", "--config", cli_env["config"], "--out", out_dir]) == 0
    for name in WORLD_FILES:
        fresh = open(os.path.join(out_dir, f"{name}.json"), "rb").read()
        original = open(os.path.join(cli_env["world"], f"{name}.json"), "rb").read()
        assert fresh == original


def test_cli_render_writes_one_image_per_record(cli_env, tmp_path, capsys):
    dump = os.path.join(cli_env["world"], "target_in.json")
    out_dir = str(tmp_path / "imgs")
    rc = cli_main(
        ["render", "--in", dump, "--config", cli_env["config"], "--out", out_dir]
    )
    assert rc == 0
    assert "rendered 30 canvases" in capsys.readouterr().out
    names = sorted(os.listdir(out_dir))
    assert "target_in-00000.pgm" in names
    assert "target_in-00000.pgm.json" in names
    assert sum(1 for n in names if n.endswith(".pgm")) == 30

    again = str(tmp_path / "imgs2")
    cli_main(["render", "--in", dump, "--config", cli_env["config"], "--out", again])
    a = open(os.path.join(out_dir, "target_in-00000.pgm"), "rb").read()
    b = open(os.path.join(again, "target_in-00000.pgm"), "rb").read()
    assert a == b


def test_cli_render_png_format(cli_env, tmp_path):
    dump = os.path.join(cli_env["world"], "target_out.json")
    out_dir = str(tmp_path / "imgs")
    rc = cli_main(
        [
            "render",
            "--in",
            dump,
            "--config",
            cli_env["config"],
            "--out",
            out_dir,
            "--format",
            "png",
        ]
    )
    assert rc == 0
    pixels, scale = import_canvas(os.path.join(out_dir, "target_out-00000.png"))
    assert pixels.shape == (16, 16)
    assert scale > 0.0


def test_cli_attack_report_is_byte_identical_on_rerun(cli_env, tmp_path, capsys):
    args = [
        "attack",
        "--shadow",
        cli_env["world"],
        "--target",
        cli_env["world"],
        "--config",
        cli_env["config"],
        "--report",
    ]
    r1, r2 = str(tmp_path / "r1.json"), str(tmp_path / "r2.json")
    assert cli_main(args + [r1]) == 0
    assert "target accuracy" in capsys.readouterr().out
    assert cli_main(args + [r2]) == 0
    assert open(r1, "rb").read() == open(r2, "rb").read()

    report = json.load(open(r1))
    assert sorted(report) == ["command", "config", "seed", "target", "validation"]
    assert report["command"] == "attack"
    assert 0.0 <= report["target"]["accuracy"] <= 1.0


def test_cli_seed_flag_overrides_config_seed(cli_env, tmp_path):
    report_path = str(tmp_path / "r.json")
    rc = cli_main(
        [
            "attack",
            "--shadow",
            cli_env["world"],
            "--target",
            cli_env["world"],
            "--config",
            cli_env["config"],
            "--seed",
            "9",
            "--report",
            report_path,
        ]
    )
    assert rc == 0
    report = json.load(open(report_path))
    assert report["seed"] == 9
    assert report["config"]["seed"] == 9
    assert report["config"]["experiment"]["seed"] == 9


def test_cli_sweep_levels_flag_overrides_config(cli_env, tmp_path, capsys):
    report_path = str(tmp_path / "s.json")
    rc = cli_main(
        [
            "sweep",
            "--config",
            cli_env["config"],
            "--levels",
            "0,1",
            "--report",
            report_path,
        ]
    )
    assert rc == 0
    out = capsys.readouterr().out
    assert "level 0.00" in out and "level 1.00" in out
    report = json.load(open(report_path))
    assert [p["level"] for p in report["points"]] == [0.0, 1.0]
    assert report["config"]["sweep_levels"] == [0.0, 1.0]


def test_cli_transfer_matrix_and_csv(cli_env, tmp_path):
    other = str(tmp_path / "other.yaml")
    save_config(replace(desk_run_config(), simulator=leaky_preset()), other)
    report_path = str(tmp_path / "t.json")
    csv_path = str(tmp_path / "t.csv")
    rc = cli_main(
        [
            "transfer",
            "--shadow-config",
            cli_env["config"],
            "--target-config",
            cli_env["config"],
            "--target-config",
            other,
            "--report",
            report_path,
            "--csv",
            csv_path,
        ]
    )
    assert rc == 0
    report = json.load(open(report_path))
    assert len(report["cells"]) == 2
    assert sorted(report["configs"]) == sorted({cli_env["config"], other})

    lines = open(csv_path).read().splitlines()
    assert lines[0] == f"shadow\\target,{cli_env['config']},{other}"
    row = lines[1].split(",")
    assert row[0] == cli_env["config"]
    # CSV cells are reprs of the report's target accuracies, in column order.
    assert [float(v) for v in row[1:]] == [
        c["target"]["accuracy"] for c in report["cells"]
    ]


def test_cli_defend_reports_epsilon_per_row(cli_env, tmp_path, capsys):
    report_path = str(tmp_path / "d.json")
    rc = cli_main(["defend", "--config", cli_env["config"], "--report", report_path])
    assert rc == 0
    out = capsys.readouterr().out
    assert "none:" in out and "dropout(0.5):" in out and "dp(sigma=2.0):" in out
    assert "epsilon inf" in out

    report = json.load(open(report_path))
    labels = [r["defense"] for r in report["rows"]]
    assert labels == ["none", "dropout(0.5)", "dp(sigma=2.0)"]
    assert report["rows"][0]["epsilon"] == "inf"
    assert report["rows"][1]["epsilon"] == "inf"
    # The accountant is charged for the epochs actually trained.
    assert report["rows"][2]["epsilon"] == privacy_loss(2.0, 5.0, 1e-5)


def test_cli_account_prints_six_decimals(capsys):
    assert cli_main(["account", "--sigma", "1", "--epochs", "1"]) == 0
    assert capsys.readouterr().out == "2.899263\n"


def test_cli_errors_exit_with_code_two(tmp_path, capsys):
    assert cli_main(["account", "--sigma", "-1", "--epochs", "1"]) == 2
    err = capsys.readouterr().err
    assert err.startswith("error: ")

    missing = str(tmp_path / "missing")
    rc = cli_main(
        ["attack", "--shadow", missing, "--target", missing, "--report", str(tmp_path / "r")]
    )
    assert rc == 2
    assert "error:" in capsys.readouterr().err

    bad = tmp_path / "bad.yaml"
    bad.write_text("sneed: 1\n")
    rc = cli_main(["simulate", "--config", str(bad), "--out", str(tmp_path / "w")])
    assert rc == 2
    assert "unknown key(s) sneed" in capsys.readouterr().err

    plain = tmp_path / "plain.yaml"
    plain.write_text("seed: 1\n")
    rc = cli_main(["defend", "--config", str(plain), "--report", str(tmp_path / "d")])
    assert rc == 2
    assert "no defense section" in capsys.readouterr().err


def test_cli_render_refuses_unsafe_image_ids(tmp_path, capsys):
    doc = {
        "version": "1",
        "provenance": {"source": "elsewhere"},
        "images": [
            {
                "image_id": "..evil",
                "width": 10,
                "height": 10,
                "detections": [{"bbox": [1, 1, 2, 2], "score": 0.5}],
            }
        ],
    }
    dump = tmp_path / "evil.json"
    dump.write_text(json.dumps(doc))
    rc = cli_main(["render", "--in", str(dump), "--out", str(tmp_path / "imgs")])
    assert rc == 2
    assert "not a safe file name" in capsys.readouterr().err


def test_cli_usage_errors(capsys):
    assert cli_main([]) == 2
    assert "usage" in capsys.readouterr().err
    assert cli_main(["--help"]) == 0
    assert "usage" in capsys.readouterr().out
