"""Key extraction, decoy generation, remote backends, registry policy."""

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from stegodiff.core import ImageTensor, SeededRng
from stegodiff.keygen import (AccessError, DEFAULT_DECOY_TABLE, InvalidKeyError,
                              KeyPair, KeyPrompt, KeyRegistry,
                              KeyTransportError, RemoteCaptioner,
                              TemplateCaptioner, TemplateParaphraser,
                              extract_private_key, generate_public_key,
                              registry_get, remote_caption, remote_paraphrase,
                              sample_decoy_key)


def _image(label):
    return ImageTensor(np.full((3, 32, 32), 0.5), label=label)


class TestKeyPrompt:
    def test_tokenization(self):
        k = KeyPrompt.from_text("an  Eiffel Tower")
        assert k.tokens == ("an", "Eiffel", "Tower")
        assert k.text == "an Eiffel Tower"
        assert k.token_count == 3

    def test_empty_rejected(self):
        with pytest.raises(InvalidKeyError):
            KeyPrompt.from_text("   ")

    def test_pair_must_differ(self):
        k = KeyPrompt.from_text("a tree")
        with pytest.raises(InvalidKeyError):
            KeyPair(private=k, public=k, session_id="s")


class TestTemplateBackends:
    def test_known_decoy_pairings(self):
        cap = TemplateCaptioner()
        par = TemplateParaphraser()
        k_priv = extract_private_key(_image("eiffel_tower"), cap)
        assert k_priv.text == "an Eiffel Tower"
        k_pub = generate_public_key(k_priv, par)
        assert k_pub.text == "a tree"

        k_priv = extract_private_key(_image("chimpanzee"), cap)
        assert k_priv.text == "chimpanzee"
        assert generate_public_key(k_priv, par).text == "lion"

    def test_unlabeled_image_rejected(self):
        img = ImageTensor(np.zeros((3, 32, 32)))
        with pytest.raises(InvalidKeyError):
            TemplateCaptioner().caption(img)

    def test_unknown_label_rejected(self):
        with pytest.raises(InvalidKeyError):
            TemplateCaptioner().caption(_image("volcano"))

    def test_unknown_private_text_rejected(self):
        with pytest.raises(InvalidKeyError):
            TemplateParaphraser().paraphrase("a volcano")

    def test_paraphraser_from_json(self, tmp_path):
        p = tmp_path / "table.json"
        p.write_text(json.dumps({"x": "y"}))
        assert TemplateParaphraser.from_json(p).paraphrase("x") == "y"

    def test_identity_paraphrase_rejected_after_retry(self):
        class Echo:
            def paraphrase(self, text):
                return text

        with pytest.raises(InvalidKeyError):
            generate_public_key(KeyPrompt.from_text("a tree"), Echo())


class _StubHandler(BaseHTTPRequestHandler):
    behavior = "ok"

    def do_POST(self):
        length = int(self.headers["Content-Length"])
        body = json.loads(self.rfile.read(length))
        if self.behavior == "error":
            self.send_response(500)
            self.end_headers()
            return
        if self.behavior == "malformed":
            payload = b"{not json"
        elif "image" in body:
            payload = json.dumps({"caption": "a cabin"}).encode()
        else:
            payload = json.dumps({"public_key": "an Eiffel Tower"}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture
def stub_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _StubHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}/"
    server.shutdown()


class TestRemoteBackends:
    def test_remote_caption_ok(self, stub_server):
        _StubHandler.behavior = "ok"
        assert remote_caption(_image("cabin"), stub_server) == "a cabin"
        backend = RemoteCaptioner(stub_server)
        assert extract_private_key(_image("cabin"), backend).text == "a cabin"

    def test_remote_paraphrase_ok(self, stub_server):
        _StubHandler.behavior = "ok"
        assert remote_paraphrase("a cabin", stub_server) == "an Eiffel Tower"

    def test_http_error_raises_transport_error(self, stub_server):
        _StubHandler.behavior = "error"
        with pytest.raises(KeyTransportError) as exc:
            remote_caption(_image("cabin"), stub_server)
        assert exc.value.status == 500

    def test_malformed_body_raises_transport_error(self, stub_server):
        _StubHandler.behavior = "malformed"
        with pytest.raises(KeyTransportError):
            remote_paraphrase("a cabin", stub_server)

    def test_unreachable_endpoint(self):
        with pytest.raises(KeyTransportError):
            remote_caption(_image("cabin"), "http://127.0.0.1:1/", timeout=0.2)


class TestRegistry:
    def _registry(self):
        pair = KeyPair(private=KeyPrompt.from_text("a cabin"),
                       public=KeyPrompt.from_text("an Eiffel Tower"),
                       session_id="s1")
        reg = KeyRegistry()
        reg.register(pair)
        return reg, pair

    def test_role_grants(self):
        reg, pair = self._registry()
        legit = registry_get(reg, "s1", "legitimate")
        assert legit == {"private": pair.private, "public": pair.public}
        assert registry_get(reg, "s1", "eve1") == {"private": None, "public": None}
        for role in ("eve2", "eve3"):
            grant = registry_get(reg, "s1", role)
            assert grant["private"] is None
            assert grant["public"] == pair.public

    def test_unknown_session_and_role(self):
        reg, _ = self._registry()
        with pytest.raises(KeyError):
            reg.get("nope", "legitimate")
        with pytest.raises(AccessError):
            reg.get("s1", "superuser")


class TestDecoySampling:
    def test_never_returns_true_key(self):
        true = KeyPrompt.from_text("a tree")
        rng = SeededRng(0, 5)
        for i in range(50):
            decoy = sample_decoy_key(true, DEFAULT_DECOY_TABLE, rng.child(i))
            assert decoy.text != true.text
            assert decoy.text in DEFAULT_DECOY_TABLE

    def test_deterministic_per_stream(self):
        true = KeyPrompt.from_text("lion")
        a = sample_decoy_key(true, DEFAULT_DECOY_TABLE, SeededRng(2, 3))
        b = sample_decoy_key(true, DEFAULT_DECOY_TABLE, SeededRng(2, 3))
        assert a == b

    def test_no_alternative_raises(self):
        true = KeyPrompt.from_text("only")
        with pytest.raises(InvalidKeyError):
            sample_decoy_key(true, {"only": "x"}, SeededRng(0))
