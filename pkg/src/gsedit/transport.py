"""HTTP transport shared by the remote edit oracle and the remote planner:
JSON POST with bounded retries and exponential backoff."""

from __future__ import annotations

import json
import logging
import time

import requests

from .errors import MalformedResponse, ServiceUnavailable, Timeout

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 30.0
DEFAULT_RETRIES = 3
DEFAULT_BACKOFF = 0.25


def post_json(url: str, payload: dict, *, timeout: float = DEFAULT_TIMEOUT,
              retries: int = DEFAULT_RETRIES,
              backoff: float = DEFAULT_BACKOFF) -> dict:
    """POST a JSON body; returns the decoded JSON response.

    Connection failures and 5xx responses are retried ``retries`` times with
    exponential backoff, then raise ServiceUnavailable. Timeouts are retried
    the same way, then raise Timeout. Invalid JSON or non-retryable HTTP
    errors raise MalformedResponse immediately.
    """
    last: Exception | None = None
    for attempt in range(retries):
        try:
            resp = requests.post(url, json=payload, timeout=timeout)
        except requests.exceptions.Timeout as exc:
            last = Timeout(f"{url} timed out after {timeout}s")
            last.__cause__ = exc
        except requests.exceptions.RequestException as exc:
            last = ServiceUnavailable(f"{url} unreachable: {exc}")
            last.__cause__ = exc
        else:
            if resp.status_code >= 500:
                last = ServiceUnavailable(f"{url} returned {resp.status_code}")
            elif resp.status_code != 200:
                raise MalformedResponse(
                    f"{url} returned {resp.status_code}: {resp.text[:200]}")
            else:
                try:
                    return resp.json()
                except (json.JSONDecodeError, ValueError) as exc:
                    raise MalformedResponse(f"{url} returned invalid JSON") from exc
        if attempt < retries - 1:
            delay = backoff * (2 ** attempt)
            logger.debug("retrying %s in %.2fs (%s)", url, delay, last)
            time.sleep(delay)
    raise last if last is not None else ServiceUnavailable(f"{url} failed")
