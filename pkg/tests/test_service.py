"""HTTP service: routes, validation, session lifecycle, eviction, UI serving."""

import base64
import json
import threading
import urllib.error
import urllib.request
from datetime import datetime

import numpy as np
import pytest

import sketchlab.service as service_mod
from sketchlab.dataset import descriptions, synth_fixture
from sketchlab.encoder import EncoderModel
from sketchlab.errors import DegenerateCombinationError, ValidationError
from sketchlab.images import GrayImage, decode_pgm, encode_pgm
from sketchlab.refine import ToyLatentBackend
from sketchlab.service import SketchService, build_server
from sketchlab.tokenizer import Tokenizer

from conftest import TINY

DESCRIPTION = "a suspect with bold diagonal markings"


def tiny_service(max_sessions=32, tuned_seed=1):
    pairs = synth_fixture(2, 3, seed=5, image_size=16)
    tok = Tokenizer.fit(descriptions(pairs), vocab_cap=TINY.vocab_cap)
    tuned = EncoderModel(TINY, tok, seed=tuned_seed)
    base = EncoderModel(TINY, tok, seed=0)
    backend = ToyLatentBackend(image_size=16, conditioning_dim=8, seed=0)
    return SketchService(tuned, base, backend, max_sessions=max_sessions)


def serve(service, **kwargs):
    server = build_server(service, port=0, **kwargs)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server, f"http://127.0.0.1:{server.server_port}"


@pytest.fixture(scope="module")
def live():
    server, url = serve(tiny_service())
    yield url
    server.shutdown()


def request(method, url, body=None, raw=None):
    data = raw if raw is not None else (
        json.dumps(body).encode("utf-8") if body is not None else None
    )
    req = urllib.request.Request(url, data=data, method=method)
    if data is not None:
        req.add_header("Content-Type", "application/json")
    try:
        with urllib.request.urlopen(req, timeout=10) as resp:
            return resp.status, resp.headers.get("Content-Type", ""), resp.read()
    except urllib.error.HTTPError as exc:
        return exc.code, exc.headers.get("Content-Type", ""), exc.read()


def json_request(method, url, body=None, raw=None):
    status, ctype, data = request(method, url, body, raw)
    payload = json.loads(data) if data and "json" in ctype else None
    return status, payload


def image_b64(seed=0, size=16):
    rng = np.random.default_rng(seed)
    img = GrayImage.from_array(rng.integers(0, 256, (size, size), dtype=np.uint8))
    return base64.b64encode(encode_pgm(img)).decode("ascii")


def create_session(url, **overrides):
    body = {
        "description": DESCRIPTION,
        "image_base64": image_b64(),
        "model_kind": "model1",
    }
    body.update(overrides)
    status, payload = json_request("POST", f"{url}/v1/sessions", body)
    assert status == 201, payload
    return payload["session_id"]


class TestHealthAndRouting:
    def test_healthz(self, live):
        status, payload = json_request("GET", f"{live}/v1/healthz")
        assert (status, payload) == (200, {"status": "ok"})

    def test_query_strings_are_ignored_for_routing(self, live):
        status, _ = json_request("GET", f"{live}/v1/healthz?probe=1")
        assert status == 200

    def test_unknown_route_is_404(self, live):
        status, payload = json_request("GET", f"{live}/v1/nope")
        assert status == 404
        assert payload["error"] == "not_found"


class TestCreateValidation:
    def test_create_returns_session_id(self, live):
        sid = create_session(live)
        assert isinstance(sid, str) and sid

    def test_empty_body_reports_every_missing_field(self, live):
        status, payload = json_request("POST", f"{live}/v1/sessions", {})
        assert status == 400
        assert set(payload["errors"]) == {"description", "image_base64", "model_kind"}

    @pytest.mark.parametrize(
        "field,value",
        [
            ("description", "   "),
            ("model_kind", "model9"),
            ("strength", 1.5),
            ("strength", "strong"),
            ("guidance_scale", -3),
            ("seed", 1.5),
            ("seed", True),
            ("image_base64", "@@not-base64@@"),
            ("image_base64", base64.b64encode(b"not a pgm").decode("ascii")),
        ],
    )
    def test_bad_field_named_in_errors(self, live, field, value):
        body = {
            "description": DESCRIPTION,
            "image_base64": image_b64(),
            "model_kind": "model1",
            field: value,
        }
        status, payload = json_request("POST", f"{live}/v1/sessions", body)
        assert status == 400
        assert field in payload["errors"]

    def test_unknown_field_rejected(self, live):
        status, payload = json_request(
            "POST",
            f"{live}/v1/sessions",
            {
                "description": DESCRIPTION,
                "image_base64": image_b64(),
                "model_kind": "model1",
                "frobnicate": 1,
            },
        )
        assert status == 400
        assert payload["errors"]["frobnicate"] == "unknown field"

    def test_non_json_body(self, live):
        status, payload = json_request("POST", f"{live}/v1/sessions", raw=b"{{{")
        assert status == 400
        assert payload["errors"]["body"] == "not valid JSON"

    def test_non_object_body(self, live):
        status, payload = json_request("POST", f"{live}/v1/sessions", raw=b"[1, 2]")
        assert status == 400
        assert payload["errors"]["body"] == "must be a JSON object"


class TestIterations:
    def test_iteration_payload_shape(self, live):
        sid = create_session(live)
        status, payload = json_request(
            "POST", f"{live}/v1/sessions/{sid}/iterations", {}
        )
        assert status == 200
        assert payload["iteration_index"] == 1
        assert set(payload["metrics"]) == {
            "ssim", "psnr", "clip_score", "perceptual_distance"
        }
        img = decode_pgm(base64.b64decode(payload["image_base64"]))
        assert (img.width, img.height) == (16, 16)
        status, payload = json_request(
            "POST", f"{live}/v1/sessions/{sid}/iterations", {}
        )
        assert payload["iteration_index"] == 2

    def test_feedback_and_overrides_persist(self, live):
        sid = create_session(live)
        json_request(
            "POST",
            f"{live}/v1/sessions/{sid}/iterations",
            {"feedback_text": "darker lines", "strength": 0.7, "guidance_scale": 2.0},
        )
        _, summary = json_request("GET", f"{live}/v1/sessions/{sid}")
        assert summary["feedback"] == ["darker lines"]
        assert summary["strength"] == 0.7
        assert summary["guidance_scale"] == 2.0
        assert "darker" in summary["prompts"][0]

    @pytest.mark.parametrize(
        "body,field",
        [
            ({"feedback_text": 42}, "feedback_text"),
            ({"strength": 2.0}, "strength"),
            ({"guidance_scale": -1}, "guidance_scale"),
            ({"surprise": 1}, "surprise"),
        ],
    )
    def test_bad_iteration_fields(self, live, body, field):
        sid = create_session(live)
        status, payload = json_request(
            "POST", f"{live}/v1/sessions/{sid}/iterations", body
        )
        assert status == 400
        assert field in payload["errors"]
        _, summary = json_request("GET", f"{live}/v1/sessions/{sid}")
        assert summary["iteration_count"] == 0

    def test_unknown_session_is_404(self, live):
        status, payload = json_request(
            "POST", f"{live}/v1/sessions/ghost/iterations", {}
        )
        assert status == 404

    def test_infinite_metrics_become_null(self, live):
        # strength 0 repeats the block projection, so from iteration 2 on the
        # image is unchanged and psnr against the previous image is infinite.
        sid = create_session(live, strength=0.0)
        json_request("POST", f"{live}/v1/sessions/{sid}/iterations", {})
        status, payload = json_request(
            "POST", f"{live}/v1/sessions/{sid}/iterations", {}
        )
        assert status == 200
        assert payload["metrics"]["psnr"] is None
        assert payload["metrics"]["ssim"] == 1.0

    def test_degenerate_combination_maps_to_422(self, live, monkeypatch):
        sid = create_session(live, model_kind="model2")

        def explode(*args, **kwargs):
            raise DegenerateCombinationError("parallel but opposite")

        monkeypatch.setattr(service_mod, "refine_step", explode)
        status, payload = json_request(
            "POST", f"{live}/v1/sessions/{sid}/iterations", {}
        )
        assert status == 422
        assert payload["error"] == "degenerate_combination"
        monkeypatch.undo()
        status, payload = json_request(
            "POST", f"{live}/v1/sessions/{sid}/iterations", {}
        )
        assert status == 200 and payload["iteration_index"] == 1

    def test_model_kinds_condition_differently(self, live):
        results = {}
        for kind in ("model1", "model2", "model3"):
            sid = create_session(live, model_kind=kind, seed=7)
            _, payload = json_request(
                "POST", f"{live}/v1/sessions/{sid}/iterations", {}
            )
            results[kind] = payload
        # model1 conditions on zeros; model2/3 condition on (different) encoders.
        assert results["model1"]["image_base64"] != results["model2"]["image_base64"]
        assert results["model2"]["metrics"]["clip_score"] != pytest.approx(
            results["model3"]["metrics"]["clip_score"]
        )


class TestSummaryAndImages:
    def test_summary_shape(self, live):
        sid = create_session(live, seed=3)
        json_request(
            "POST",
            f"{live}/v1/sessions/{sid}/iterations",
            {"feedback_text": "more shading"},
        )
        json_request("POST", f"{live}/v1/sessions/{sid}/iterations", {})
        status, summary = json_request("GET", f"{live}/v1/sessions/{sid}")
        assert status == 200
        assert set(summary) == {
            "session_id", "description", "model_kind", "strength",
            "guidance_scale", "seed", "iteration_count", "feedback",
            "prompts", "metrics", "created_at", "updated_at",
        }
        assert summary["session_id"] == sid
        assert summary["description"] == DESCRIPTION
        assert summary["seed"] == 3
        assert summary["iteration_count"] == 2
        assert len(summary["prompts"]) == 2
        for key in ("ssim", "psnr", "clip_score", "perceptual_distance"):
            assert len(summary["metrics"][key]) == 2
        datetime.fromisoformat(summary["created_at"])
        datetime.fromisoformat(summary["updated_at"])

    def test_image_zero_is_the_stored_input(self, live):
        b64 = image_b64(seed=9)
        sid = create_session(live, image_base64=b64)
        status, ctype, data = request(
            "GET", f"{live}/v1/sessions/{sid}/iterations/0/image"
        )
        assert status == 200
        assert ctype == "image/x-portable-graymap"
        assert data == base64.b64decode(b64)  # 16x16 input needs no resize

    def test_generated_image_is_served(self, live):
        sid = create_session(live)
        _, payload = json_request("POST", f"{live}/v1/sessions/{sid}/iterations", {})
        status, _, data = request(
            "GET", f"{live}/v1/sessions/{sid}/iterations/1/image"
        )
        assert status == 200
        assert data == base64.b64decode(payload["image_base64"])

    def test_image_index_out_of_range_is_404(self, live):
        sid = create_session(live)
        status, _, _ = request("GET", f"{live}/v1/sessions/{sid}/iterations/5/image")
        assert status == 404

    def test_summary_unknown_session_is_404(self, live):
        status, _ = json_request("GET", f"{live}/v1/sessions/ghost")
        assert status == 404


class TestDeletion:
    def test_delete_then_404(self, live):
        sid = create_session(live)
        status, _, data = request("DELETE", f"{live}/v1/sessions/{sid}")
        assert status == 204
        assert data == b""
        status, _ = json_request("GET", f"{live}/v1/sessions/{sid}")
        assert status == 404
        status, _, _ = request("DELETE", f"{live}/v1/sessions/{sid}")
        assert status == 404


class TestEviction:
    def test_oldest_session_evicted_at_cap(self):
        server, url = serve(tiny_service(max_sessions=2))
        try:
            first = create_session(url)
            second = create_session(url)
            third = create_session(url)
            assert json_request("GET", f"{url}/v1/sessions/{first}")[0] == 404
            assert json_request("GET", f"{url}/v1/sessions/{second}")[0] == 200
            assert json_request("GET", f"{url}/v1/sessions/{third}")[0] == 200
        finally:
            server.shutdown()

    def test_access_refreshes_lru_position(self):
        server, url = serve(tiny_service(max_sessions=2))
        try:
            first = create_session(url)
            second = create_session(url)
            json_request("GET", f"{url}/v1/sessions/{first}")  # first is now newest
            third = create_session(url)
            assert json_request("GET", f"{url}/v1/sessions/{first}")[0] == 200
            assert json_request("GET", f"{url}/v1/sessions/{second}")[0] == 404
            assert json_request("GET", f"{url}/v1/sessions/{third}")[0] == 200
        finally:
            server.shutdown()


class TestStaticUi:
    def test_ui_directory_served_with_spa_fallback(self, tmp_path):
        (tmp_path / "index.html").write_text("<title>ui</title>", encoding="utf-8")
        (tmp_path / "app.js").write_text("console.log(1)", encoding="utf-8")
        server, url = serve(tiny_service(), ui_dir=tmp_path)
        try:
            status, ctype, data = request("GET", f"{url}/")
            assert status == 200 and b"ui" in data
            assert ctype.startswith("text/html")
            status, ctype, _ = request("GET", f"{url}/app.js")
            assert status == 200 and ctype.startswith("text/javascript")
            status, _, data = request("GET", f"{url}/sessions/abc")  # SPA route
            assert status == 200 and b"ui" in data
            status, _, _ = request("GET", f"{url}/missing.png")
            assert status == 404
        finally:
            server.shutdown()

    def test_no_ui_directory_means_404(self, live):
        status, _, _ = request("GET", f"{live}/")
        assert status == 404


class TestServiceConfig:
    def test_max_sessions_must_be_positive(self):
        with pytest.raises(ValidationError):
            tiny_service(max_sessions=0)
