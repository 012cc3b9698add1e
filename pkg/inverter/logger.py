"""
Logger module for writing JSONL run events.
The metrics file of a run directory is this event stream.
"""
import json
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Optional, Union


class RunLogger:
    """Logger for training and evaluation events in JSONL format."""

    def __init__(self, log_path: Optional[Union[str, Path]] = None):
        """
        Initialize logger.

        Args:
            log_path: Path of the JSONL file; None keeps events in memory only.
                A file-backed logger keeps no in-memory copy.
        """
        self.log_path = Path(log_path) if log_path is not None else None
        self.events = []
        self.log_file = None
        if self.log_path is not None:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            # Append so resumed runs extend the same history
            self.log_file = open(self.log_path, "a", encoding="utf-8")

    def _write_event(self, event_type: str, data: Dict[str, Any]):
        """
        Write an event to the log file.

        Args:
            event_type: Type of event
            data: Event data dictionary
        """
        event = {
            "timestamp": datetime.now(timezone.utc).replace(tzinfo=None).isoformat() + "Z",
            "event_type": event_type,
            "data": data,
        }
        if self.log_path is None:
            self.events.append(event)
        elif self.log_file is not None:
            self.log_file.write(json.dumps(event, ensure_ascii=False) + "\n")
            self.log_file.flush()

    def log_event(self, event_type: str, data: Dict[str, Any]):
        """Log a general event."""
        self._write_event(event_type, data)

    def log_run_start(self, command: str, config: Dict[str, Any]):
        self._write_event("run_start", {"command": command, "config": config})

    def log_stage_start(self, stage: int, epochs: int, learning_rate: float, trainable: list):
        """
        Log stage start event.

        Args:
            stage: Stage tag
            epochs: Planned epochs
            learning_rate: Stage learning rate
            trainable: Names of generators receiving updates
        """
        self._write_event("stage_start", {
            "stage": stage,
            "epochs": epochs,
            "learning_rate": learning_rate,
            "trainable": trainable,
        })

    def log_epoch(self, stage: int, epoch: int, losses: Dict[str, Dict[str, float]]):
        """
        Log per-epoch loss means.

        Args:
            stage: Stage tag
            epoch: 1-based epoch index
            losses: generator name -> term name -> mean loss
        """
        self._write_event("epoch_end", {"stage": stage, "epoch": epoch, "losses": losses})

    def log_stage_end(self, stage: int, epochs_run: int):
        self._write_event("stage_end", {"stage": stage, "epochs_run": epochs_run})

    def log_cancel_stage(self, stage: int, reason: str):
        """Log a stage skipped by ablation flags."""
        self._write_event("cancel_stage", {"stage": stage, "reason": reason})

    def log_checkpoint(self, path: Union[str, Path], stage: int, epoch: Optional[int] = None):
        self._write_event("checkpoint_saved", {"path": str(path), "stage": stage, "epoch": epoch})

    def log_error(self, error: Exception, context: Optional[Dict[str, Any]] = None):
        """
        Log error event.

        Args:
            error: Exception object
            context: Optional context information
        """
        data = {
            "error_type": type(error).__name__,
            "error_message": str(error),
        }

        if context:
            data.update(context)

        self._write_event("error", data)

    def close(self):
        """Close the log file."""
        if self.log_file:
            self.log_file.close()
            self.log_file = None

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()
