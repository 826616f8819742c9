import numpy as np
import pytest

from riskpomdp.core import ValidationFailure
from riskpomdp.modelfile import ModelParseError, export_cassandra, format_model, read_model, write_model


def test_round_trip_is_exact(tmp_path, fixture_model):
    write_model(fixture_model, tmp_path / "m.txt", ["seed=0"])
    back = read_model(tmp_path / "m.txt")
    for f in ("transition", "observation", "reward", "initial_belief"):
        assert np.array_equal(getattr(back, f), getattr(fixture_model, f))
    assert (back.states, back.discount, back.horizon, back.terminal) == (
        fixture_model.states, 0.98, 60, fixture_model.terminal)
    assert format_model(back, ["seed=0"]) == (tmp_path / "m.txt").read_text()


def test_parse_errors(tmp_path, fixture_model):
    text = format_model(fixture_model)
    (tmp_path / "a.txt").write_text(text.replace("DISCOUNT", "DISKOUNT"))
    with pytest.raises(ModelParseError, match="unknown directive"):
        read_model(tmp_path / "a.txt")
    (tmp_path / "b.txt").write_text(text.replace("R: m_p_on", "R: nowhere"))
    with pytest.raises(ModelParseError, match="nowhere"):
        read_model(tmp_path / "b.txt")
    lines = [l for l in text.splitlines() if not l.startswith("T: manual_on m_np_off")]
    (tmp_path / "c.txt").write_text("\n".join(lines) + "\n")
    with pytest.raises(ValidationFailure):
        read_model(tmp_path / "c.txt")
    assert read_model(tmp_path / "c.txt", validate=False).transition[0, 0].sum() == 0


def test_cassandra_export(tmp_path, fixture_model):
    export_cassandra(fixture_model, tmp_path / "m.pomdp")
    text = (tmp_path / "m.pomdp").read_text()
    assert text.startswith("discount: 0.98\nvalues: reward\n")
    lines = text.splitlines()
    i = lines.index("T: auto_on")
    rows = np.array([[float(v) for v in l.split()] for l in lines[i + 1:i + 10]])
    assert np.array_equal(rows, fixture_model.transition[2])
    assert "R: * : * : m_p_on : * 0.741" in lines
