import pytest

from hvtrack.config import Config, apply_overrides, dump_config, load_config, parse_config
from hvtrack.errors import ParseError
from hvtrack.estimation import LossWeights


def test_defaults():
    cfg = Config()
    assert cfg.template_size == 120 and cfg.levels == (30, 60, 120) and cfg.d_max == 4
    assert (cfg.lambda_d, cfg.lambda_m, cfg.lambda_v) == (1.0, 1.0, 1.0)
    assert cfg.lr == 1e-4 and cfg.beta1 == 0.9 and cfg.beta2 == 0.999 and cfg.batch_size == 32
    assert cfg.decay_factor == 0.1 and cfg.decay_every == 5
    assert cfg.confidence_threshold == 0.5 and cfg.head == "analytic"
    assert LossWeights() == LossWeights(1.0, 1.0, 1.0)


def test_round_trip(tmp_path):
    cfg = Config(lr=3e-4, levels=(60, 120), head="learned", augment=False, seed=9)
    p = tmp_path / "run.cfg"
    p.write_text(dump_config(cfg))
    assert load_config(p) == cfg


def test_parse_comments_and_types():
    cfg = parse_config("# comment\nlr = 0.001  # trailing\nbatch_size = 8\naugment = false\n\nlevels = [30, 120]\n")
    assert cfg.lr == 0.001 and cfg.batch_size == 8 and cfg.augment is False and cfg.levels == (30, 120)


@pytest.mark.parametrize("text,line", [("lr = 1\nbogus = 3\n", 2), ("batch_size = 1.5\n", 1),
                                       ("\n\nno equals sign\n", 3), ("levels = 4\n", 1)])
def test_parse_errors(text, line):
    with pytest.raises(ParseError) as err:
        parse_config(text)
    assert err.value.line == line


def test_overrides():
    cfg = apply_overrides(Config(), ["seed=4", "head = learned"])
    assert cfg.seed == 4 and cfg.head == "learned"
