import json
import random
import time
from types import SimpleNamespace
from unittest.mock import MagicMock, patch

import openai
import pytest

from scenerag.cassette import Cassette
from scenerag.client import STAGES, SceneRagClient, load_questions
from scenerag.config import EmbeddingConfig, SessionConfig
from scenerag.index import EphemeralIndex
from scenerag.llm_handler import LLMHandler
from scenerag.relations import init_params, save_params
from scenerag.utils import StageError, ValidationError, exit_code_for
from tests.conftest import assert_matches_oracle, chat_response
from tests.test_chunking import CATEGORIES, PREDICATES, parse_chunk

QUESTION = "How many cars are there?"


def perfect_answer(prompt):
    """Structured answer rebuilt from the chunks quoted in the prompt."""
    data = prompt.split("extracted from the image: ", 1)[1].split(", please answer the following question:")[0]
    objects, relationships = [], []
    for text in ([] if data == "none" else data.split("; ")):
        category, count, cells, phrases = parse_chunk(text)
        objects.append({"category": category, "count": count, "locations": [cell.name for cell in cells]})
        for phrase in phrases:
            words = phrase.split(" ")
            relationships.append({"subject": words[0], "predicate": " ".join(words[1:-1]), "object": words[-1]})
    return "Here you go:\n" + json.dumps({"objects": objects, "relationships": relationships})


def write_scene(directory, image_id, objects, relationships=()):
    raw = {
        "image_id": image_id, "width": 300, "height": 300,
        "objects": [{"id": i, "category": c, "bbox": list(box)} for i, (c, box) in enumerate(objects)],
        "relationships": [{"subject_id": s, "predicate": p, "object_id": o} for s, p, o in relationships],
    }
    (directory / f"{image_id}.json").write_text(json.dumps(raw), encoding="utf-8")


def random_raw_scene(rng, image_id):
    """At most four categories so k=4 retrieval always covers the whole scene."""
    categories = rng.sample(CATEGORIES, rng.randint(1, 4))
    objects = []
    for _ in range(rng.randint(1, 8)):
        x0, x1 = sorted(rng.uniform(0, 300) for _ in range(2))
        y0, y1 = sorted(rng.uniform(0, 300) for _ in range(2))
        objects.append((rng.choice(categories), (x0, y0, x1, y1)))
    relationships = []
    if len(objects) >= 2:
        for _ in range(rng.randint(0, 4)):
            s, o = rng.sample(range(len(objects)), 2)
            relationships.append((s, rng.choice(PREDICATES), o))
    return image_id, objects, relationships


@pytest.fixture
def live_client(make_chat_client):
    """Live-mode client over a stub backend that always answers 'There are 3 cars.'."""
    chat = make_chat_client(lambda prompt: "There are 3 cars.")
    config = SessionConfig()
    return SceneRagClient(config, llm_handler=LLMHandler(config.completion, client=chat))


def test_ask_record_then_replay(tmp_path, exemplar_file, make_chat_client):
    path = tmp_path / "ask.cassette"
    chat = make_chat_client(lambda prompt: "There are 3 cars.")
    cassette = Cassette(path, writable=True)
    recording_config = SessionConfig(mode="record", cassette=str(path))
    recorder = SceneRagClient(
        recording_config,
        llm_handler=LLMHandler(recording_config.completion, "record", cassette, client=chat),
        cassette=cassette,
    )
    recorded = recorder.answer_question(exemplar_file, QUESTION)
    assert chat.chat.completions.create.call_count == 1

    replayer = SceneRagClient(SessionConfig(mode="replay", cassette=str(path)))
    first = replayer.answer_question(exemplar_file, QUESTION, output_path=tmp_path / "first.json")
    second = replayer.answer_question(exemplar_file, QUESTION, output_path=tmp_path / "second.json")

    assert first.answer == "There are 3 cars."
    assert first.mode == "replay"
    assert first.prompt_digest == recorded.prompt_digest
    assert first.retrieved[0][0].category == "car"
    assert [chunk.category for chunk, _ in first.retrieved] == [chunk.category for chunk, _ in recorded.retrieved]
    assert (tmp_path / "first.json").read_bytes() == (tmp_path / "second.json").read_bytes()
    assert list(first.timings) == list(STAGES)


def test_replay_miss_maps_to_exit_code_three(tmp_path, exemplar_file):
    path = tmp_path / "empty.cassette"
    path.write_text("", encoding="utf-8")
    client = SceneRagClient(SessionConfig(mode="replay", cassette=str(path)))
    with pytest.raises(StageError) as exc:
        client.answer_question(exemplar_file, QUESTION)
    assert exc.value.stage == "complete"
    assert exit_code_for(exc.value) == 3


def test_empty_scene_prompts_with_none(tmp_path, live_client):
    write_scene(tmp_path, "blank", [])
    result = live_client.answer_question(tmp_path / "blank.json", "What is in the picture?")
    assert result.retrieved == ()
    prompt = live_client.llm_handler.client.chat.completions.create.call_args.kwargs["messages"][0]["content"]
    assert prompt == (
        "Based on the information extracted from the image: none, "
        "please answer the following question: What is in the picture?."
    )


def test_invalid_scene_fails_before_any_backend_call(tmp_path):
    scene = tmp_path / "bad.json"
    scene.write_text(json.dumps({
        "image_id": "bad", "width": 10, "height": 10,
        "objects": [{"id": 1, "category": "car", "bbox": [5, 5, 1, 1]}],
        "relationships": [],
    }), encoding="utf-8")
    chat = MagicMock()
    embedder = MagicMock()
    config = SessionConfig()
    client = SceneRagClient(config, embedder=embedder, llm_handler=LLMHandler(config.completion, client=chat))
    with pytest.raises(StageError) as exc:
        client.answer_question(scene, QUESTION)
    assert exc.value.stage == "load"
    assert exit_code_for(exc.value) == 1
    chat.chat.completions.create.assert_not_called()
    embedder.embed_batch.assert_not_called()


def test_empty_question_is_rejected(exemplar_file, live_client):
    with pytest.raises(StageError) as exc:
        live_client.answer_question(exemplar_file, "  ")
    assert exc.value.stage == "load"


@pytest.mark.parametrize("k", [0, -2])
def test_explicit_k_below_one_is_rejected(exemplar_file, live_client, k):
    with pytest.raises(StageError) as exc:
        live_client.answer_question(exemplar_file, QUESTION, k=k)
    assert exc.value.stage == "load"
    assert f"k must be >= 1, got {k}" in str(exc.value)
    assert exit_code_for(exc.value) == 1
    live_client.llm_handler.client.chat.completions.create.assert_not_called()


def test_explicit_k_overrides_config(exemplar_file, live_client):
    result = live_client.answer_question(exemplar_file, QUESTION, k=1)
    assert [chunk.category for chunk, _ in result.retrieved] == ["car"]


def test_index_is_discarded_after_the_session(tmp_path, exemplar_file, live_client):
    created = []

    def tracking_index(*args, **kwargs):
        index = EphemeralIndex(*args, **kwargs)
        created.append(index)
        return index

    before = sorted(p.name for p in tmp_path.rglob("*"))
    with patch("scenerag.client.EphemeralIndex", side_effect=tracking_index):
        result = live_client.answer_question(exemplar_file, QUESTION, k=2)

    assert len(result.retrieved) == 2
    assert len(created) == 1
    assert len(created[0]) == 0
    assert sorted(p.name for p in tmp_path.rglob("*")) == before


def test_result_serialization(tmp_path, exemplar_file, live_client):
    result = live_client.answer_question(exemplar_file, QUESTION)
    document = result.to_dict()
    assert "timings_ms" not in document
    assert document["stages"] == list(STAGES)
    assert set(result.to_dict(include_timings=True)["timings_ms"]) == set(STAGES)
    assert document["retrieved"][0]["text"].startswith("car: 3")


def test_eval_record_then_replay_matches_oracle(tmp_path, fixtures_dir, marker_answers, eval_oracle, make_chat_client):
    dataset = fixtures_dir / "eval" / "scenes"
    questions = fixtures_dir / "eval" / "questions.jsonl"
    path = tmp_path / "eval.cassette"

    cassette = Cassette(path, writable=True)
    recording_config = SessionConfig(mode="record", cassette=str(path), workers=3)
    recorder = SceneRagClient(
        recording_config,
        llm_handler=LLMHandler(recording_config.completion, "record", cassette, client=make_chat_client(marker_answers)),
        cassette=cassette,
    )
    recorded = recorder.run_eval(dataset, questions)
    assert_matches_oracle(recorded, eval_oracle)

    replay_config = SessionConfig(mode="replay", cassette=str(path), workers=2)
    first = SceneRagClient(replay_config).run_eval(dataset, questions, tmp_path / "first.json")
    second = SceneRagClient(replay_config).run_eval(dataset, questions, tmp_path / "second.json")
    assert_matches_oracle(first, eval_oracle)
    assert (tmp_path / "first.json").read_bytes() == (tmp_path / "second.json").read_bytes()
    assert json.loads((tmp_path / "first.json").read_text(encoding="utf-8"))["parse_failures"] == 1


def test_eval_perfect_answers_score_one(tmp_path, make_chat_client):
    write_scene(tmp_path, "p1", [("car", (10, 10, 50, 50)), ("tree", (200, 10, 290, 90))], [(0, "near", 1)])
    write_scene(tmp_path, "p2", [("dog", (100, 100, 200, 200)), ("dog", (0, 250, 40, 290))])
    write_scene(tmp_path, "p3", [("man", (10, 100, 60, 200)), ("horse", (0, 120, 120, 260))], [(0, "riding", 1)])

    config = SessionConfig(cache_index=True)
    client = SceneRagClient(config, llm_handler=LLMHandler(config.completion, client=make_chat_client(perfect_answer)))
    report = client.run_eval(tmp_path, report_path=tmp_path / "report.md")

    assert report.overall_score == 1.0
    assert report.parse_failures == 0
    for attribute in ("category", "quantity", "location", "relationship"):
        assert report.means[attribute]["recall"] == 1.0
        assert report.means[attribute]["f1"] == 1.0
    assert (tmp_path / "report.md").read_text(encoding="utf-8").startswith("# Evaluation Report")
    assert client._index_cache == {}


def test_eval_prose_answer_is_a_parse_failure(tmp_path, make_chat_client):
    write_scene(tmp_path, "q1", [("car", (10, 10, 50, 50))])
    write_scene(tmp_path, "q2", [("sofa", (0, 200, 300, 300))])

    def answer_for(prompt):
        return "It is a living room." if "sofa" in prompt else perfect_answer(prompt)

    config = SessionConfig()
    client = SceneRagClient(config, llm_handler=LLMHandler(config.completion, client=make_chat_client(answer_for)))
    report = client.run_eval(tmp_path)
    assert report.parse_failures == 1
    assert report.overall_score == 0.5
    by_id = {item.image_id: item for item in report.per_image}
    assert by_id["q2"].parse_ok is False
    assert by_id["q2"].scores["category"].recall == 0.0


def test_eval_provider_failure_is_scored_as_parse_failure(tmp_path, make_chat_client):
    write_scene(tmp_path, "r1", [("car", (10, 10, 50, 50))])
    chat = MagicMock()
    chat.chat.completions.create.side_effect = openai.OpenAIError("backend down")
    config = SessionConfig()
    report = SceneRagClient(config, llm_handler=LLMHandler(config.completion, client=chat)).run_eval(tmp_path)
    assert report.parse_failures == 1
    assert report.overall_score == 0.0


def test_eval_survives_malformed_backend_replies(tmp_path):
    write_scene(tmp_path, "m1", [("car", (10, 10, 50, 50))])
    write_scene(tmp_path, "m2", [("sofa", (0, 200, 300, 300))])
    write_scene(tmp_path, "m3", [("kite", (100, 0, 200, 80))])

    def reply(**kwargs):
        prompt = kwargs["messages"][0]["content"]
        if "sofa" in prompt:
            return SimpleNamespace(choices=[])
        if "kite" in prompt:
            raise RuntimeError("connection reset")
        return chat_response(perfect_answer(prompt))

    chat = MagicMock()
    chat.chat.completions.create.side_effect = reply
    config = SessionConfig(workers=2)
    report = SceneRagClient(config, llm_handler=LLMHandler(config.completion, client=chat)).run_eval(tmp_path)

    assert report.image_count == 3
    assert report.parse_failures == 2
    by_id = {item.image_id: item for item in report.per_image}
    assert by_id["m1"].parse_ok is True
    assert by_id["m2"].parse_ok is False
    assert by_id["m3"].parse_ok is False


def test_eval_missing_scene_aborts(tmp_path, live_client):
    write_scene(tmp_path, "s1", [("car", (10, 10, 50, 50))])
    questions = tmp_path / "questions.jsonl"
    questions.write_text('{"image_id": "s1"}\n{"image_id": "s2"}\n', encoding="utf-8")
    with pytest.raises(ValidationError) as exc:
        live_client.run_eval(tmp_path, questions)
    assert "s2" in str(exc.value)


def test_eval_hundred_synthetic_images(tmp_path, make_chat_client):
    rng = random.Random(42)
    for n in range(100):
        write_scene(tmp_path, *random_raw_scene(rng, f"syn{n:03d}"))
    config = SessionConfig(workers=4, embedding=EmbeddingConfig(dim=256))
    client = SceneRagClient(config, llm_handler=LLMHandler(config.completion, client=make_chat_client(perfect_answer)))

    start = time.perf_counter()
    report = client.run_eval(tmp_path)
    assert time.perf_counter() - start < 60.0
    assert report.image_count == 100
    assert report.overall_score == 1.0


def test_load_questions_formats(tmp_path):
    lines = tmp_path / "q.jsonl"
    lines.write_text('{"image_id": 1, "question": "How many cars?"}\n\n{"image_id": "b"}\n', encoding="utf-8")
    assert load_questions(lines) == [{"image_id": "1", "question": "How many cars?"}, {"image_id": "b"}]

    array = tmp_path / "q.json"
    array.write_text('[{"image_id": "a"}]', encoding="utf-8")
    assert load_questions(array) == [{"image_id": "a"}]

    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"question": "where?"}\n{"image_id": "x", "question": 3}\nnot json\n', encoding="utf-8")
    with pytest.raises(ValidationError) as exc:
        load_questions(bad)
    assert len(exc.value.errors) == 3


def test_rank_relations(tmp_path):
    params_path = tmp_path / "params.json"
    save_params(init_params(seed=3, d=4, d_v=2, d_w=3, labels=["man", "horse", "riding", "near"]), params_path)
    scene = tmp_path / "feat.json"
    scene.write_text(json.dumps({
        "image_id": "feat", "width": 100, "height": 100,
        "objects": [
            {"id": 1, "category": "man", "bbox": [0, 0, 10, 10], "feature": [0.3, -0.2]},
            {"id": 2, "category": "horse", "bbox": [0, 5, 20, 30], "feature": [0.1, 0.4]},
        ],
        "relationships": [{"subject_id": 1, "predicate": "riding", "object_id": 2, "union_feature": [0.2, 0.1]}],
    }), encoding="utf-8")
    suggestions = SceneRagClient().rank_relations(scene, params_path, top=2, predicate_labels=["riding", "near"])
    assert len(suggestions) == 1
    assert {label for label, _ in suggestions[0]["ranked"]} == {"riding", "near"}


def test_load_questions_rejects_repeated_images(tmp_path):
    questions = tmp_path / "q.jsonl"
    questions.write_text(
        '{"image_id": "a1", "question": "How many cars?"}\n{"image_id": "a2"}\n{"image_id": "a1", "question": "Where is the car?"}\n',
        encoding="utf-8",
    )
    with pytest.raises(ValidationError) as exc:
        load_questions(questions)
    assert exc.value.errors == ["record 2: duplicate image_id 'a1' (first in record 0)"]


def test_eval_with_repeated_image_fails_before_any_backend_call(tmp_path, make_chat_client):
    write_scene(tmp_path, "a1", [("car", (10, 10, 50, 50))])
    questions = tmp_path / "questions.jsonl"
    questions.write_text('{"image_id": "a1"}\n{"image_id": "a1", "question": "Is there a car?"}\n', encoding="utf-8")
    chat = make_chat_client(perfect_answer)
    config = SessionConfig()
    with pytest.raises(ValidationError):
        SceneRagClient(config, llm_handler=LLMHandler(config.completion, client=chat)).run_eval(tmp_path, questions)
    chat.chat.completions.create.assert_not_called()


def test_ask_accepts_non_ascii_question(exemplar_file, live_client):
    result = live_client.answer_question(exemplar_file, "有几辆汽车?")
    assert result.answer == "There are 3 cars."
    assert sorted(chunk.category for chunk, _ in result.retrieved) == ["car", "man", "tree"]
