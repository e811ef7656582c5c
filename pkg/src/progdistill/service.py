"""Client for an external program-generation service.

Wire protocol: HTTP POST of a JSON object {"question": str,
"prompt_profile": str} to the configured endpoint; the response body is a JSON
object {"program_text": str}, returned verbatim. The prompt profile selects
between pointer and non-pointer usage exemplars on the service side; the
client passes it through untouched.

Any transport or protocol failure raises ServiceError, which is distinct from
a ParseError: callers route returned program text through run_with_fallback,
while a service error is a pipeline-level condition (the CLI can be told to
fall back to template generation instead).
"""

from __future__ import annotations

import json
import os
import urllib.error
import urllib.request
from dataclasses import dataclass

ENDPOINT_ENV_VAR = "PROGDISTILL_PROGRAM_SERVICE"

PROFILE_POINTER = "pointer"
PROFILE_PLAIN = "plain"


class ServiceError(RuntimeError):
    pass


@dataclass
class ProgramServiceClient:
    endpoint: str
    timeout: float = 5.0

    def generate(self, question: str, prompt_profile: str = PROFILE_POINTER) -> str:
        payload = json.dumps({"question": question,
                              "prompt_profile": prompt_profile}).encode("utf-8")
        request = urllib.request.Request(
            self.endpoint, data=payload,
            headers={"Content-Type": "application/json"}, method="POST")
        try:
            with urllib.request.urlopen(request, timeout=self.timeout) as response:
                body = response.read()
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise ServiceError(f"program service unreachable: {exc}") from exc
        try:
            decoded = json.loads(body.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ServiceError(f"program service returned bad JSON: {exc}") from exc
        program = decoded.get("program_text")
        if not isinstance(program, str):
            raise ServiceError("program service response missing 'program_text'")
        return program


def llm_generate(question: str, prompt_profile: str,
                 client: ProgramServiceClient) -> str:
    """Fetch a generated program for `question`; the text is returned verbatim
    and must be routed through run_with_fallback by the caller."""
    return client.generate(question, prompt_profile)


def client_from_env(timeout: float = 5.0) -> ProgramServiceClient:
    endpoint = os.environ.get(ENDPOINT_ENV_VAR, "")
    if not endpoint:
        raise ServiceError(
            f"no program service configured (set {ENDPOINT_ENV_VAR})")
    return ProgramServiceClient(endpoint=endpoint, timeout=timeout)
