"""
End-of-epoch run checkpoints: the last few epochs plus the best feasible one.
"""
import logging
import os
import pickle

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


def save_checkpoint(payload, filename):
    payload = dict(payload, version=CHECKPOINT_VERSION)
    with open(filename, "wb") as f:
        pickle.dump(payload, f, protocol=pickle.HIGHEST_PROTOCOL)


def load_checkpoint(filename):
    """
    Loads a run checkpoint.

    Raises:
        FileNotFoundError: If the file does not exist.
        pickle.UnpicklingError: If the file is corrupt or from another checkpoint version.
    """
    logger.debug(f"Loading checkpoint from {filename}")
    try:
        with open(filename, "rb") as f:
            payload = pickle.load(f)
    except FileNotFoundError as e:
        logger.error(f"File not found: {filename}")
        raise e
    except (pickle.UnpicklingError, EOFError) as e:
        logger.error(f"Error loading file: {filename}. Reason: {e}")
        raise pickle.UnpicklingError(str(e)) from e
    if not isinstance(payload, dict) or payload.get("version") != CHECKPOINT_VERSION:
        raise pickle.UnpicklingError(f"{filename} is not a version {CHECKPOINT_VERSION} run checkpoint")
    return payload


class CheckpointManager:
    """
    Writes epoch-NNNN.pkl files into a directory, keeping the newest `keep`, and best.pkl for
    the highest score among feasible epochs.
    """

    def __init__(self, directory, keep=3):
        self.directory = directory
        self.keep = keep
        self.best_score = None
        self.saved = []
        os.makedirs(directory, exist_ok=True)

    @property
    def best_path(self):
        return os.path.join(self.directory, "best.pkl")

    def save(self, epoch, payload, score=None, feasible=False):
        filename = os.path.join(self.directory, f"epoch-{epoch:04d}.pkl")
        save_checkpoint(dict(payload, epoch=epoch), filename)
        self.saved.append(filename)
        while len(self.saved) > self.keep:
            old = self.saved.pop(0)
            if os.path.exists(old):
                os.remove(old)
        if feasible and score is not None and (self.best_score is None or score > self.best_score):
            self.best_score = score
            save_checkpoint(dict(payload, epoch=epoch), self.best_path)
            logger.debug(f"New best checkpoint at epoch {epoch} (score {score:.4g})")
        return filename
