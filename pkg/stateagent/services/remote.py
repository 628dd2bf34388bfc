import asyncio
import logging
from typing import Any, Dict, List, Optional

import aiohttp

from ..errors import MalformedResponse, TransportError
from ..models.policy import PolicyDecision, PolicyView, RemoteEndpoint
from .policy import Policy
from .wire import parse_completion, to_wire

logger = logging.getLogger(__name__)

RETRYABLE_STATUS = {408, 425, 429, 500, 502, 503, 504}


class _Retryable(Exception):
    pass


class ChatCompletionsClient:
    """OpenAI-compatible chat-completions transport with retries and a shared in-flight limit."""

    def __init__(self, endpoint: RemoteEndpoint, session: Optional[aiohttp.ClientSession] = None):
        self.endpoint = endpoint
        self._session = session
        self._semaphore = asyncio.Semaphore(endpoint.max_concurrency)

    def _headers(self) -> Dict[str, str]:
        headers = {"Content-Type": "application/json"}
        token = self.endpoint.auth_token.get_secret_value()
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def build_payload(self, messages: List[Dict[str, Any]], tools: Optional[List[Dict[str, Any]]] = None) -> Dict[str, Any]:
        sampling = self.endpoint.sampling
        payload: Dict[str, Any] = {
            "model": self.endpoint.model_name,
            "messages": messages,
            "temperature": sampling.temperature,
            "top_p": sampling.top_p,
            "top_k": sampling.top_k,
        }
        if sampling.max_tokens is not None:
            payload["max_tokens"] = sampling.max_tokens
        if tools:
            payload["tools"] = tools
            payload["tool_choice"] = "auto"
        payload.update(sampling.extra)
        return payload

    async def complete(self, payload: Dict[str, Any]) -> Dict[str, Any]:
        url = self.endpoint.completions_url
        attempts = self.endpoint.max_attempts
        last_error = "no attempt made"
        async with self._semaphore:
            for attempt in range(1, attempts + 1):
                try:
                    return await self._post(url, payload)
                except _Retryable as exc:
                    last_error = str(exc)
                except (aiohttp.ClientError, asyncio.TimeoutError) as exc:
                    last_error = f"{type(exc).__name__}: {exc}"
                if attempt < attempts:
                    delay = self.endpoint.backoff_base * (2 ** (attempt - 1))
                    logger.warning(
                        "chat completion attempt %d/%d failed (%s); retrying in %.1fs",
                        attempt, attempts, last_error, delay,
                    )
                    await asyncio.sleep(delay)
        raise TransportError(f"chat completion failed after {attempts} attempts: {last_error}")

    async def _post(self, url: str, payload: Dict[str, Any]) -> Dict[str, Any]:
        timeout = aiohttp.ClientTimeout(total=self.endpoint.timeout)
        if self._session is not None:
            return await self._send(self._session, url, payload, timeout)
        async with aiohttp.ClientSession() as session:
            return await self._send(session, url, payload, timeout)

    async def _send(self, session: aiohttp.ClientSession, url: str, payload, timeout) -> Dict[str, Any]:
        async with session.post(url, json=payload, headers=self._headers(), timeout=timeout) as response:
            if response.status in RETRYABLE_STATUS:
                raise _Retryable(f"HTTP {response.status}")
            if response.status >= 400:
                text = await response.text()
                raise TransportError(f"HTTP {response.status}: {text[:200]}")
            try:
                data = await response.json(content_type=None)
            except ValueError:
                raise MalformedResponse("response body is not JSON")
            if not isinstance(data, dict):
                raise MalformedResponse("response body is not a JSON object")
            return data


class RemotePolicy(Policy):
    """Drives a served chat model; one instance may serve many concurrent episodes."""

    name = "remote"

    def __init__(self, endpoint: RemoteEndpoint, client: Optional[ChatCompletionsClient] = None):
        self.endpoint = endpoint
        self.client = client or ChatCompletionsClient(endpoint)

    async def step(self, view: PolicyView) -> PolicyDecision:
        payload = self.client.build_payload(to_wire(view.messages, view.system_prompt), view.tools)
        data = await self.client.complete(payload)
        return parse_completion(data)
