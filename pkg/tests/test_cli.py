import json

import pytest

from scenerag.cassette import Cassette
from scenerag.client import SceneRagClient
from scenerag.config import SessionConfig
from scenerag.llm_handler import LLMHandler
from scenerag_cli import main
from tests.conftest import stub_chat_client

QUESTION = "How many cars are there?"


def _printed_block(output, opening, closing):
    """The indented JSON document printed between an unindented opening and closing line."""
    lines = output.splitlines()
    start = lines.index(opening)
    end = lines.index(closing, start)
    return "\n".join(lines[start:end + 1])


@pytest.fixture
def ask_cassette(tmp_path, exemplar_file):
    path = tmp_path / "ask.cassette"
    cassette = Cassette(path, writable=True)
    config = SessionConfig(mode="record", cassette=str(path))
    handler = LLMHandler(config.completion, "record", cassette, client=stub_chat_client(lambda p: "There are 3 cars."))
    SceneRagClient(config, llm_handler=handler, cassette=cassette).answer_question(exemplar_file, QUESTION)
    return path


def test_ask_replay(tmp_path, exemplar_file, ask_cassette, capsys):
    out = tmp_path / "answer.json"
    code = main(["ask", "--scene", str(exemplar_file), "--question", QUESTION,
                 "--mode", "replay", "--cassette", str(ask_cassette), "--out", str(out)])
    assert code == 0
    assert "There are 3 cars." in capsys.readouterr().out
    document = json.loads(out.read_text(encoding="utf-8"))
    assert document["answer"] == "There are 3 cars."
    assert document["retrieved"][0]["category"] == "car"
    assert "timings_ms" not in document


def test_ask_with_timings(tmp_path, exemplar_file, ask_cassette):
    out = tmp_path / "answer.json"
    main(["ask", "--scene", str(exemplar_file), "--question", QUESTION, "--mode", "replay",
          "--cassette", str(ask_cassette), "--out", str(out), "--timings"])
    assert "timings_ms" in json.loads(out.read_text(encoding="utf-8"))


def test_ask_cassette_miss_exits_three(exemplar_file, ask_cassette):
    assert main(["ask", "--scene", str(exemplar_file), "--question", "Where is the tree?",
                 "--mode", "replay", "--cassette", str(ask_cassette)]) == 3


def test_ask_invalid_scene_exits_one(tmp_path):
    scene = tmp_path / "bad.json"
    scene.write_text('{"image_id": "bad", "width": -1, "height": 10, "objects": [], "relationships": []}', encoding="utf-8")
    assert main(["ask", "--scene", str(scene), "--question", QUESTION]) == 1


def test_ask_without_api_key_exits_two(exemplar_file, monkeypatch):
    monkeypatch.delenv("SCENERAG_API_KEY", raising=False)
    assert main(["ask", "--scene", str(exemplar_file), "--question", QUESTION]) == 2


def test_replay_without_cassette_exits_one(exemplar_file):
    assert main(["ask", "--scene", str(exemplar_file), "--question", QUESTION, "--mode", "replay"]) == 1


def test_ingest(tmp_path, fixtures_dir, capsys):
    code = main(["ingest", "--from", "vg150-annotations", "--in", str(fixtures_dir / "vg150_sample.json"),
                 "--out", str(tmp_path / "scenes")])
    assert code == 0
    output = capsys.readouterr().out
    summary = json.loads(_printed_block(output, "{", "}"))
    assert (summary["images"], summary["rejected"]) == (4, 1)

    strict = main(["ingest", "--from", "vg150-annotations", "--in", str(fixtures_dir / "vg150_sample.json"),
                   "--out", str(tmp_path / "strict"), "--strict"])
    assert strict == 1


def test_eval_replay_writes_report(tmp_path, fixtures_dir, marker_answers):
    dataset = fixtures_dir / "eval" / "scenes"
    questions = fixtures_dir / "eval" / "questions.jsonl"
    path = tmp_path / "eval.cassette"
    cassette = Cassette(path, writable=True)
    config = SessionConfig(mode="record", cassette=str(path))
    handler = LLMHandler(config.completion, "record", cassette, client=stub_chat_client(marker_answers))
    SceneRagClient(config, llm_handler=handler, cassette=cassette).run_eval(dataset, questions)

    report = tmp_path / "report.txt"
    code = main(["eval", "--dataset", str(dataset), "--questions", str(questions), "--report", str(report),
                 "--mode", "replay", "--cassette", str(path), "--dataset-name", "sample", "--workers", "2"])
    assert code == 0
    text = report.read_text(encoding="utf-8")
    assert text.startswith("Recall\n")
    assert "0.6486" in text


def test_init_params_then_rank_relations(tmp_path, capsys):
    params = tmp_path / "params.json"
    assert main(["init-params", "--out", str(params), "--labels", "man,horse,riding,near",
                 "--dim", "8", "--visual-dim", "2", "--word-dim", "4", "--seed", "5"]) == 0

    scene = tmp_path / "feat.json"
    scene.write_text(json.dumps({
        "image_id": "feat", "width": 100, "height": 100,
        "objects": [
            {"id": 1, "category": "man", "bbox": [0, 0, 10, 10], "feature": [0.3, -0.2]},
            {"id": 2, "category": "horse", "bbox": [0, 5, 20, 30], "feature": [0.1, 0.4]},
        ],
        "relationships": [{"subject_id": 1, "predicate": "riding", "object_id": 2, "union_feature": [0.2, 0.1]}],
    }), encoding="utf-8")
    capsys.readouterr()
    assert main(["rank-relations", "--scene", str(scene), "--params", str(params), "--labels", "riding,near"]) == 0
    output = capsys.readouterr().out
    suggestions = json.loads(_printed_block(output, "[", "]"))
    assert suggestions[0]["annotated"] == "riding"
    assert len(suggestions[0]["ranked"]) == 2


def test_unknown_config_key_exits_one(tmp_path, exemplar_file):
    config = tmp_path / "config.yaml"
    config.write_text("colour: blue\n", encoding="utf-8")
    assert main(["--config", str(config), "ask", "--scene", str(exemplar_file), "--question", QUESTION]) == 1


def test_wrongly_typed_config_value_exits_one(tmp_path, exemplar_file, capsys):
    config = tmp_path / "config.yaml"
    config.write_text('k: "four"\n', encoding="utf-8")
    assert main(["--config", str(config), "ask", "--scene", str(exemplar_file), "--question", QUESTION]) == 1
    assert "k must be int, got str 'four'" in capsys.readouterr().out
