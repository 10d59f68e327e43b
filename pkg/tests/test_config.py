import pytest
import yaml

from ordigrade import config as C
from ordigrade.augment import Transform


def parse(text, tmp_path, env=None):
    return C.parse_config(yaml.safe_load(text), tmp_path, env or {})


def test_default_config_parses(tmp_path):
    cfg = parse(C.default_config_text("runs/x"), tmp_path)
    assert cfg.output_dir == tmp_path / "runs/x"
    assert cfg.domains["pretrain"].synthetic.n == 2000 and cfg.domains["main"].synthetic.n == 1000
    assert cfg.domains["pretrain"].synthetic.seed == 0 and cfg.domains["main"].synthetic.seed == 1
    assert cfg.stages.main.epochs == 30 and cfg.stages.main.optimizer == "radam"
    assert cfg.stages.posttrain.augment is None and cfg.stages.pretrain.augment is not None
    assert len(cfg.tta_transforms()) == 8 and cfg.tta_transforms(False) == [Transform("identity")]
    assert cfg.trim == 0.25 and cfg.n_folds == 5


def test_seed_propagates_and_env_wins(tmp_path):
    text = "seed: 3\noutput_dir: o\n"
    cfg = parse(text, tmp_path)
    assert cfg.seed == 3 and cfg.stages.main.seed == 3 and cfg.model.seed == 3
    assert cfg.domains["main"].synthetic.seed == 4
    env = parse(text, tmp_path, {C.SEED_ENV: "9"})
    assert env.seed == 9 and env.domains["pretrain"].synthetic.seed == 9


@pytest.mark.parametrize("text, needle", [
    ("seed: 0\n", "output_dir"),
    ("output_dir: o\nbogus: 1\n", "bogus"),
    ("output_dir: o\nseed: -1\n", "seed"),
    ("output_dir: o\nstages: {main: {epochz: 3}}\n", "epochz"),
    ("output_dir: o\ndata: {main: {synthetic: {n: 10}, csv: {labels: x}}}\n", "exactly one"),
    ("output_dir: o\ndata: {n_folds: 1}\n", "n_folds"),
    ("output_dir: o\nmetrics: {mode: triage}\n", "metrics.mode"),
    ("output_dir: o\nmodel: {input_shape: [1, 64, 64]}\n", "input_shape"),
    ("output_dir: o\nensemble: {rounding: bankers}\n", "rounding"),
    ("output_dir: o\nstages: {posttrain: {augment: true}}\n", "posttrain"),
    ("output_dir: o\njobs: 0\n", "jobs"),
])
def test_invalid_configs(text, needle, tmp_path):
    with pytest.raises(C.ConfigError, match=needle):
        parse(text, tmp_path)


def test_csv_domain_paths(tmp_path):
    (tmp_path / "imgs").mkdir()
    (tmp_path / "labels.csv").write_text("image,level\n")
    text = ("output_dir: o\ndata: {main: {csv: {labels: labels.csv, images: imgs, schema: [image, level]}}}\n"
            "model: {input_shape: [3, 32, 32]}\n")
    src = parse(text, tmp_path).domains["main"]
    assert not src.is_synthetic and src.schema == ("image", "level")
    assert src.images == tmp_path / "imgs" and src.preprocess.target_size == (32, 32)


def test_outputs_confined(tmp_path):
    cfg = parse("output_dir: o\n", tmp_path)
    assert cfg.inside_output("a/b.csv") == tmp_path / "o/a/b.csv"
    for bad in ("../x.csv", tmp_path / "x.csv"):
        with pytest.raises(C.ConfigError):
            cfg.inside_output(bad)


def test_variants(tmp_path):
    cfg = parse("output_dir: o\nmodel: {variants: 4}\n", tmp_path)
    assert [cfg.variant_name(v) for v in range(4)] == ["desk0", "desk1", "desk2", "desk3"]
    assert cfg.variant_model(2).seed == cfg.model.seed + 2
    assert cfg.checkpoint_dir(1) == tmp_path / "o/checkpoints/desk1"


def test_load_config_errors(tmp_path):
    with pytest.raises(C.ConfigError):
        C.load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("output_dir: [unclosed\n")
    with pytest.raises(C.ConfigError):
        C.load_config(bad)
