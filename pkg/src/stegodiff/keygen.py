"""Semantic key generation and the in-process key agreement registry.

The private key is a natural-language description of the secret image; the
public key is a same-category decoy prompt. Backends are pluggable: the
template backend maps class labels through fixed tables (deterministic,
test-friendly), the remote backend calls an external captioner or
paraphraser over HTTP.
"""

from __future__ import annotations

import base64
import io
import json
import os
from dataclasses import dataclass, field

import requests

from .core import ImageTensor, SeededRng, save_array


class InvalidKeyError(ValueError):
    """A backend produced an unusable key (empty, or equal to its pair)."""


class KeyTransportError(IOError):
    """A remote key backend failed; retriable."""

    def __init__(self, message, status=None):
        super().__init__(message)
        self.status = status


class AccessError(PermissionError):
    """A role requested key material its policy does not grant."""


@dataclass(frozen=True)
class KeyPrompt:
    """A key as surface text plus its token sequence."""

    text: str
    tokens: tuple

    @classmethod
    def from_text(cls, text: str) -> "KeyPrompt":
        tokens = tuple(text.split())
        if not tokens:
            raise InvalidKeyError("key text must contain at least one token")
        return cls(" ".join(tokens), tokens)

    @property
    def token_count(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class KeyPair:
    private: KeyPrompt
    public: KeyPrompt
    session_id: str

    def __post_init__(self):
        if self.private.text == self.public.text:
            raise InvalidKeyError("private and public keys must differ")


# Captions for the procedural classes; the Eiffel Tower / tree and
# chimpanzee / lion pairings come straight from the decoy table below.
CAPTION_TEMPLATES = {
    "eiffel_tower": "an Eiffel Tower",
    "tree": "a tree",
    "chimpanzee": "chimpanzee",
    "lion": "lion",
    "cabin": "a cabin",
}

DEFAULT_DECOY_TABLE = {
    "an Eiffel Tower": "a tree",
    "chimpanzee": "lion",
    "a tree": "a cabin",
    "lion": "chimpanzee",
    "a cabin": "an Eiffel Tower",
}


class TemplateCaptioner:
    """Maps an image's class label through a fixed caption table."""

    def __init__(self, templates=None):
        self.templates = dict(templates) if templates is not None else dict(CAPTION_TEMPLATES)

    def caption(self, image: ImageTensor) -> str:
        if image.label is None:
            raise InvalidKeyError("template captioner needs a labeled image")
        try:
            return self.templates[image.label]
        except KeyError:
            raise InvalidKeyError(f"no caption template for label {image.label!r}")


class TemplateParaphraser:
    """Maps each private caption to a fixed same-category decoy."""

    def __init__(self, decoy_table=None):
        self.decoy_table = (
            dict(decoy_table) if decoy_table is not None else dict(DEFAULT_DECOY_TABLE)
        )

    def paraphrase(self, private_text: str) -> str:
        try:
            return self.decoy_table[private_text]
        except KeyError:
            raise InvalidKeyError(f"no decoy configured for {private_text!r}")

    @classmethod
    def from_json(cls, path) -> "TemplateParaphraser":
        with open(path) as f:
            return cls(json.load(f))


class RemoteCaptioner:
    """HTTP captioning backend. POST {"image": <base64 array file>}."""

    def __init__(self, endpoint: str, credentials_env: str | None = None, timeout=10.0):
        self.endpoint = endpoint
        self.credentials_env = credentials_env
        self.timeout = timeout

    def caption(self, image: ImageTensor) -> str:
        return remote_caption(image, self.endpoint, self._credentials(), self.timeout)

    def _credentials(self):
        if self.credentials_env:
            return os.environ.get(self.credentials_env)
        return None


def _encode_image_payload(image: ImageTensor) -> str:
    import tempfile

    with tempfile.NamedTemporaryFile(suffix=".arr") as tmp:
        save_array(tmp.name, image.data)
        tmp.seek(0)
        return base64.b64encode(tmp.read()).decode("ascii")


def remote_caption(image: ImageTensor, endpoint: str, credentials=None, timeout=10.0) -> str:
    """Fetch a caption from an external service, returned verbatim."""
    headers = {}
    if credentials:
        headers["Authorization"] = f"Bearer {credentials}"
    try:
        resp = requests.post(
            endpoint,
            json={"image": _encode_image_payload(image)},
            headers=headers,
            timeout=timeout,
        )
    except requests.RequestException as exc:
        raise KeyTransportError(f"captioner unreachable: {exc}") from exc
    if resp.status_code != 200:
        raise KeyTransportError(
            f"captioner returned HTTP {resp.status_code}", status=resp.status_code
        )
    try:
        body = resp.json()
        return body["caption"]
    except (ValueError, KeyError, TypeError) as exc:
        raise KeyTransportError(f"malformed captioner response: {exc}") from exc


def remote_paraphrase(private_text: str, endpoint: str, credentials=None, timeout=10.0) -> str:
    headers = {}
    if credentials:
        headers["Authorization"] = f"Bearer {credentials}"
    try:
        resp = requests.post(
            endpoint, json={"private_key": private_text}, headers=headers, timeout=timeout
        )
    except requests.RequestException as exc:
        raise KeyTransportError(f"paraphraser unreachable: {exc}") from exc
    if resp.status_code != 200:
        raise KeyTransportError(
            f"paraphraser returned HTTP {resp.status_code}", status=resp.status_code
        )
    try:
        return resp.json()["public_key"]
    except (ValueError, KeyError, TypeError) as exc:
        raise KeyTransportError(f"malformed paraphraser response: {exc}") from exc


class RemoteParaphraser:
    def __init__(self, endpoint: str, credentials_env: str | None = None, timeout=10.0):
        self.endpoint = endpoint
        self.credentials_env = credentials_env
        self.timeout = timeout

    def paraphrase(self, private_text: str) -> str:
        creds = os.environ.get(self.credentials_env) if self.credentials_env else None
        return remote_paraphrase(private_text, self.endpoint, creds, self.timeout)


def extract_private_key(image: ImageTensor, backend) -> KeyPrompt:
    """Describe the secret image; the description is the private key."""
    text = backend.caption(image)
    if not text or not text.strip():
        raise InvalidKeyError("captioner produced an empty caption")
    return KeyPrompt.from_text(text)


def generate_public_key(k_priv: KeyPrompt, backend) -> KeyPrompt:
    """Derive the decoy prompt that will shape the visible stego content."""
    text = backend.paraphrase(k_priv.text)
    if text == k_priv.text:
        # one retry, then give up; the template backend never hits this
        text = backend.paraphrase(k_priv.text)
        if text == k_priv.text:
            raise InvalidKeyError("paraphrase equals the private key")
    return KeyPrompt.from_text(text)


# ---------------------------------------------------------------------------
# Key agreement registry

ROLE_POLICY = {
    "legitimate": "both",
    "eve1": "none",
    "eve2": "public_only",
    "eve3": "public_only",
}


@dataclass
class KeyRegistry:
    """In-process stand-in for the key storage and distribution center."""

    sessions: dict = field(default_factory=dict)
    policy: dict = field(default_factory=lambda: dict(ROLE_POLICY))

    def register(self, pair: KeyPair):
        self.sessions[pair.session_id] = pair

    def get(self, session_id: str, role: str) -> dict:
        if session_id not in self.sessions:
            raise KeyError(f"unknown session {session_id!r}")
        if role not in self.policy:
            raise AccessError(f"unknown role {role!r}")
        pair = self.sessions[session_id]
        grant = self.policy[role]
        out = {"private": None, "public": None}
        if grant == "both":
            out["private"] = pair.private
            out["public"] = pair.public
        elif grant == "public_only":
            out["public"] = pair.public
        return out


def registry_get(registry: KeyRegistry, session_id: str, role: str) -> dict:
    return registry.get(session_id, role)


def sample_decoy_key(true_private: KeyPrompt, decoy_table: dict, rng: SeededRng) -> KeyPrompt:
    """A wrong private key for the second eavesdropper, drawn uniformly
    from the configured private-key prompts excluding the true one."""
    candidates = sorted(t for t in decoy_table if t != true_private.text)
    if not candidates:
        raise InvalidKeyError("decoy table has no alternative to the true private key")
    return KeyPrompt.from_text(rng.choice(candidates))
