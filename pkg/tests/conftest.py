import json

import pytest

from medcascade.corpus import ComplaintRecord, CorpusManifest, LabelSet
from medcascade.gateway import Gateway, MockBackend, ResponseCache


VOCAB = {"type": ["chronic", "acute"], "severity": ["mild", "severe"],
         "diagnosis": ["diabetes", "influenza"]}


def make_record(rid="r1", text="عندي صداع شديد من 3 ايام.", ctype="chronic",
                severity="severe", diagnosis=None, age=40, gender="female"):
    return ComplaintRecord(id=rid, text=text, age=age, gender=gender,
                           labels=LabelSet(condition_type=ctype, severity=severity,
                                           diagnosis=diagnosis))


@pytest.fixture
def small_vocab():
    return dict(VOCAB)


@pytest.fixture
def mock_gateway(tmp_path):
    gw = Gateway(cache=ResponseCache(tmp_path / "cache"))
    gw.register_backend(MockBackend())
    return gw


@pytest.fixture
def corpus_files(tmp_path):
    """A 3-record jsonl corpus plus manifest sidecar on disk."""
    records = [
        {"id": "p1", "text": "عندي حمى شديد من يومين.", "age": 30, "gender": "male",
         "labels": {"diagnosis": None, "type": "acute", "severity": "severe"}},
        {"id": "p2", "text": "عندي سكري خفيف.", "age": 61, "gender": "female",
         "labels": {"diagnosis": "diabetes", "type": "chronic", "severity": "mild"}},
        {"id": "p3", "text": "حمى بسيط ورقمي 01234567890.", "age": None, "gender": None,
         "labels": {"diagnosis": None, "type": "acute", "severity": "mild"}},
    ]
    corpus = tmp_path / "corpus.jsonl"
    corpus.write_text("".join(json.dumps(r, ensure_ascii=False) + "\n" for r in records),
                      encoding="utf-8")
    manifest = tmp_path / "corpus.manifest.json"
    manifest.write_text(json.dumps({"schema_version": 1, "vocab": VOCAB}),
                        encoding="utf-8")
    return corpus, manifest


def manifest_obj():
    return CorpusManifest(vocab=dict(VOCAB))


# one visible pass/fail line per acceptance criterion
ACCEPTANCE_PREFIX = "test_criterion"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if (report.when == "call" and item.name.startswith(ACCEPTANCE_PREFIX)
            and "test_acceptance" in str(item.fspath)):
        label = item.name.removeprefix(ACCEPTANCE_PREFIX + "_")
        status = "PASS" if report.passed else "FAIL"
        capman = item.config.pluginmanager.getplugin("capturemanager")
        if capman:
            with capman.global_and_fixture_disabled():
                print(f"[acceptance] {label}: {status}")
        else:
            print(f"[acceptance] {label}: {status}")
