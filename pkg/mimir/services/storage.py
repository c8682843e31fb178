# ---------------------------------------------------
# Storage
# /services/storage.py
# ---------------------------------------------------
import logging
from typing import List, Optional

logger = logging.getLogger(__name__)


class DurableVolume:
    """Crash-surviving append-only volume, attachable to one node at a time.

    Records are opaque bytes addressed by LSN (contiguous from 0). The
    highest epoch ever presented to the volume fences out older writers.
    """

    def __init__(self, volume_id: str):
        self.volume_id = volume_id
        self.records: List[bytes] = []
        self.attached_to: Optional[str] = None
        self.attach_epoch: int = 0
        self.max_epoch: int = 0

    @property
    def next_lsn(self) -> int:
        return len(self.records)

    def attach(self, node: str, epoch: int) -> Optional[str]:
        """Attach `node`; returns the holder that was forcibly detached, if any.

        Raises ValueError when the attachment is refused.
        """
        if self.attached_to == node and epoch == self.attach_epoch:
            return None
        if self.attached_to is not None and epoch <= self.attach_epoch:
            raise ValueError(
                f"{self.volume_id} attached to {self.attached_to} at epoch "
                f"{self.attach_epoch}, refused {node} at epoch {epoch}"
            )
        if epoch < self.max_epoch:
            raise ValueError(
                f"{self.volume_id} has seen epoch {self.max_epoch}, refused {node} at {epoch}"
            )
        previous = self.attached_to
        self.attached_to = node
        self.attach_epoch = epoch
        self.max_epoch = max(self.max_epoch, epoch)
        return previous

    def detach(self, node: str) -> bool:
        if self.attached_to != node:
            return False
        self.attached_to = None
        return True

    def check_writer(self, node: str, epoch: int) -> None:
        if self.attached_to != node:
            raise ValueError(f"{self.volume_id} is not attached to {node}")
        if epoch < self.max_epoch:
            raise ValueError(
                f"{self.volume_id} stale epoch {epoch} < {self.max_epoch} from {node}"
            )

    def append(self, node: str, record: bytes, epoch: int) -> int:
        self.check_writer(node, epoch)
        self.records.append(record)
        self.max_epoch = max(self.max_epoch, epoch)
        return len(self.records) - 1

    def truncate(self, node: str, epoch: int, lsn: int) -> None:
        """Drop every record at or after `lsn`"""
        self.check_writer(node, epoch)
        del self.records[lsn:]

    def read(self, node: str) -> List[bytes]:
        if self.attached_to != node:
            raise ValueError(f"{self.volume_id} is not attached to {node}")
        return list(self.records)
