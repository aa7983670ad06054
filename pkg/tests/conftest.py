import json
from pathlib import Path
from types import SimpleNamespace
from unittest.mock import MagicMock

import pytest

FIXTURES = Path(__file__).parent / "fixtures"


def chat_response(text, refusal=None):
    """Object shaped like an OpenAI chat-completion response."""
    message = SimpleNamespace(content=text, refusal=refusal)
    return SimpleNamespace(choices=[SimpleNamespace(message=message)])


def stub_chat_client(answer_for):
    """
    Mock OpenAI client whose completions come from ``answer_for(prompt_text)``.
    """
    client = MagicMock()
    client.chat.completions.create.side_effect = lambda **kwargs: chat_response(
        answer_for(kwargs["messages"][0]["content"])
    )
    return client


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def exemplar_raw():
    """The three-car street scene used throughout the docs."""
    return json.loads((FIXTURES / "exemplar_scene.json").read_text(encoding="utf-8"))


@pytest.fixture
def exemplar_file(tmp_path, exemplar_raw):
    path = tmp_path / "exemplar.json"
    path.write_text(json.dumps(exemplar_raw), encoding="utf-8")
    return path


@pytest.fixture
def eval_answers():
    return json.loads((FIXTURES / "eval" / "answers.json").read_text(encoding="utf-8"))


@pytest.fixture
def eval_oracle():
    return json.loads((FIXTURES / "eval" / "oracle_report.json").read_text(encoding="utf-8"))


@pytest.fixture
def marker_answers(eval_answers):
    """Answer function picking the fixture answer whose marker occurs in the prompt."""
    def answer_for(prompt):
        for entry in eval_answers.values():
            if entry["marker"] in prompt:
                return entry["answer"]
        return "I do not know."
    return answer_for


@pytest.fixture
def make_chat_client():
    return stub_chat_client


def assert_matches_oracle(report, oracle, places=4):
    """Compare a MetricsReport with the hand-computed evaluation oracle."""
    assert report.image_count == oracle["images"]
    assert report.parse_failures == oracle["parse_failures"]
    for attribute, expected in oracle["means"].items():
        for metric, value in expected.items():
            assert round(report.means[attribute][metric], places) == value, (attribute, metric)
    by_id = {item.image_id: item for item in report.per_image}
    for image_id, attributes in oracle["per_image"].items():
        for attribute, expected in attributes.items():
            scores = by_id[image_id].scores[attribute]
            if expected is None:
                assert not scores.defined, (image_id, attribute)
                continue
            for metric, value in expected.items():
                assert round(getattr(scores, metric), places) == value, (image_id, attribute, metric)
    recalls = {(a, label): round(r, places) for (a, label), r in report.class_recalls.items()}
    expected_recalls = {
        (a, label): r for a, classes in oracle["class_recalls"].items() for label, r in classes.items()
    }
    assert recalls == expected_recalls
    assert report.overall_score == oracle["overall_passing"] / oracle["overall_classes"]
