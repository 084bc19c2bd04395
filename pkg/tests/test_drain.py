import pytest

from cclh.drain import Drain, ParserConfig, TemplateSet, mine_log_templates


def test_numbers_generalize():
    ts = mine_log_templates(["connect to 10.0.0.1 failed", "connect to 10.0.0.2 failed"])
    assert ts.templates == ("connect to <*> failed",)


def test_singleton():
    assert mine_log_templates(["service ready"]).templates == ("service ready",)


def test_token_count_separates():
    ts = mine_log_templates(["request done", "request done quickly", "request done quickly now"])
    assert len(ts) == 3


def test_empty_input():
    assert len(mine_log_templates([])) == 0


def test_similarity_threshold_merges_words():
    # 3 of 4 tokens agree -> similarity 0.75 >= 0.4
    ts = mine_log_templates(["user alice logged in", "user bob logged in"])
    assert ts.templates == ("user <*> logged in",)
    strict = mine_log_templates(["user alice logged in", "user bob logged in"],
                                ParserConfig(similarity_threshold=0.9))
    assert len(strict) == 2


def test_match_does_not_learn():
    d = Drain()
    d.add("disk full on sda")
    assert d.match("disk full on sda") == 0
    assert d.match("totally different message here") is None
    assert d.templates == ["disk full on sda"]


def test_template_set_round_trip():
    ts = mine_log_templates(["a 1 b", "a 2 b", "x y"])
    back = TemplateSet.from_dict(ts.to_dict())
    assert back == ts
    m = back.matcher()
    assert m.match("a 77 b") == 0
    assert m.match("x y") == 1


@pytest.mark.parametrize("kw", [{"tree_depth": 1}, {"similarity_threshold": 0.0}, {"max_children": 1}])
def test_bad_config(kw):
    with pytest.raises(ValueError):
        ParserConfig(**kw)
