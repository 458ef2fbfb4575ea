import json
import logging
import logging.handlers
import os
from concurrent.futures import ThreadPoolExecutor

from tqdm import tqdm

from charline.constants import LOGDIR
from charline.errors import SceneParseError

TQDM_FORMAT = "{desc}: {percentage:3.0f}% {n_fmt}/{total_fmt} [{elapsed}<{remaining}, {rate_fmt}] {postfix}"

handler = None


def build_logger(logger_name, log_file=None, level="INFO"):
    global handler

    formatter = logging.Formatter(
        fmt="%(asctime)s | %(levelname)s | %(name)s | %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )

    # Set the format of root handlers
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.WARNING)
    logging.getLogger().handlers[0].setFormatter(formatter)

    logger = logging.getLogger(logger_name)
    logger.setLevel(level)

    # Add a file handler for the package logger
    if log_file is not None and handler is None:
        directory = os.path.dirname(log_file) or LOGDIR
        os.makedirs(directory, exist_ok=True)
        handler = logging.handlers.TimedRotatingFileHandler(
            log_file, when='D', utc=True)
        handler.setFormatter(formatter)
        logger.addHandler(handler)

    return logger


def write_json(path, doc):
    """Write a document with fixed formatting so repeated runs are byte-identical."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(doc, handle, indent=1, ensure_ascii=False)
        handle.write("\n")


def read_json(path):
    """Load a JSON document; malformed text raises SceneParseError with its position."""
    with open(path, "r", encoding="utf-8") as handle:
        try:
            return json.load(handle)
        except json.JSONDecodeError as exc:
            raise SceneParseError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
        except UnicodeDecodeError as exc:
            raise SceneParseError(f"{path}: not UTF-8: {exc}") from exc


def ordered_map(func, items, jobs=1, desc=None):
    """Apply ``func`` over ``items`` with up to ``jobs`` threads, keeping input order.

    The result never depends on ``jobs``: ``Executor.map`` yields in
    submission order.
    """
    items = list(items)
    jobs = jobs if jobs and jobs > 0 else 1
    with tqdm(total=len(items), ncols=120, desc=desc or "Processing", bar_format=TQDM_FORMAT,
              disable=None, leave=False) as progress:
        if jobs == 1:
            results = []
            for item in items:
                results.append(func(item))
                progress.update(1)
            return results
        results = []
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            for result in executor.map(func, items):
                results.append(result)
                progress.update(1)
        return results
