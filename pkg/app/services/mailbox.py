import hashlib
import threading
from dataclasses import dataclass
from typing import Optional

import numpy as np

from app.core.config import settings
from app.core.exceptions import EngineError
from app.core.logging_config import get_logger

logger = get_logger(__name__)


@dataclass(frozen=True, eq=False)
class Message:
    """One immutable slot value: payload is a read-only copy."""
    version: int
    payload: np.ndarray
    tag: int
    checksum: Optional[bytes] = None


def _digest(payload: np.ndarray) -> bytes:
    return hashlib.blake2b(payload.tobytes(), digest_size=16).digest()


class Mailbox:
    """
    Single-slot latest-value cell between one writer and one reader.

    put() builds a new Message and swaps it into the slot with a single reference
    assignment, so a reader sees either the previous or the new message whole.
    Versions start at 1 and increase by one per put; 0 means "never written".
    An optional doorbell event is set on every put so the reader can sleep.
    """

    def __init__(self, name: str, doorbell: Optional[threading.Event] = None, checksums: Optional[bool] = None):
        self.name = name
        self.doorbell = doorbell
        self.checksums = settings.mailbox_checksums if checksums is None else checksums
        self._slot: Optional[Message] = None
        self._version = 0 # writer side
        self.last_seen = 0 # reader side

    def put(self, payload: np.ndarray, tag: int) -> int:
        """Overwrites the slot; returns the new version."""
        data = np.array(payload, dtype=float, copy=True)
        data.setflags(write=False)
        self._version += 1
        checksum = _digest(data) if self.checksums else None
        self._slot = Message(version=self._version, payload=data, tag=int(tag), checksum=checksum)
        if self.doorbell is not None:
            self.doorbell.set()
        return self._version

    def peek(self) -> Optional[Message]:
        """Latest message without marking it seen."""
        return self._slot

    @property
    def version(self) -> int:
        message = self._slot
        return 0 if message is None else message.version

    def has_new(self) -> bool:
        return self.version > self.last_seen

    def take(self) -> Optional[Message]:
        """Latest message, marked seen. None if nothing was ever written."""
        message = self._slot
        if message is None:
            return None
        if message.version < self.last_seen:
            raise EngineError(f"Mailbox '{self.name}' went backwards: version {message.version} after {self.last_seen}")
        if message.checksum is not None and _digest(message.payload) != message.checksum:
            logger.error("Mailbox checksum mismatch", mailbox=self.name, version=message.version)
            raise EngineError(f"Mailbox '{self.name}' payload failed its checksum at version {message.version}")
        self.last_seen = message.version
        return message


class StopFlag:
    """Write-once broadcast flag raised by the coordinator."""

    def __init__(self):
        self._event = threading.Event()
        self.reason: Optional[str] = None

    def raise_flag(self, reason: str) -> None:
        if not self._event.is_set():
            self.reason = reason
            self._event.set()

    def is_set(self) -> bool:
        return self._event.is_set()

    def wait(self, timeout: float) -> bool:
        """Sleeps up to timeout seconds; True if the flag was raised."""
        return self._event.wait(timeout)
