import json

import pytest

from scenerag.cassette import Cassette
from scenerag.utils import CassetteMissError, ValidationError


def test_record_appends_json_lines(tmp_path):
    path = tmp_path / "nested" / "run.cassette"
    cassette = Cassette(path, writable=True)
    cassette.record("completion", "abc", "There are 3 cars.")
    cassette.record("embedding", "def", {"dimension": 2, "vectors": [[1.0, 0.0]]})

    lines = path.read_text(encoding="utf-8").splitlines()
    assert [json.loads(line)["kind"] for line in lines] == ["completion", "embedding"]
    assert json.loads(lines[0]) == {"kind": "completion", "digest": "abc", "response": "There are 3 cars."}
    assert ("completion", "abc") in cassette
    assert len(cassette) == 2


def test_record_keeps_first_entry_for_a_key(tmp_path):
    path = tmp_path / "run.cassette"
    cassette = Cassette(path, writable=True)
    cassette.record("completion", "abc", "first")
    cassette.record("completion", "abc", "second")
    assert len(path.read_text(encoding="utf-8").splitlines()) == 1
    assert cassette.lookup("completion", "abc") == "first"


def test_reload_and_lookup(tmp_path):
    path = tmp_path / "run.cassette"
    Cassette(path, writable=True).record("completion", "abc", "Ein Hund läuft.")

    replay = Cassette(path)
    assert replay.lookup("completion", "abc") == "Ein Hund läuft."
    with pytest.raises(CassetteMissError) as exc:
        replay.lookup("completion", "zzz")
    assert exc.value.digest == "zzz"
    assert "zzz" in str(exc.value)
    with pytest.raises(CassetteMissError):
        replay.lookup("embedding", "abc")


def test_read_only_cassette_refuses_records(tmp_path):
    with pytest.raises(ValidationError):
        Cassette(tmp_path / "ro.cassette").record("completion", "abc", "x")


def test_malformed_line_names_line_number(tmp_path):
    path = tmp_path / "bad.cassette"
    path.write_text('{"kind": "completion", "digest": "a", "response": "ok"}\n\n{"kind": "completion"}\n', encoding="utf-8")
    with pytest.raises(ValidationError) as exc:
        Cassette(path)
    assert "line 3" in str(exc.value)


def test_memory_only_cassette():
    cassette = Cassette(writable=True)
    cassette.record("completion", "abc", "x")
    assert cassette.lookup("completion", "abc") == "x"
