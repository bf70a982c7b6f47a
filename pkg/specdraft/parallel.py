import concurrent.futures
import csv
import functools
import traceback
from collections.abc import Iterable
from pathlib import Path
from time import sleep
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Tuple

from tqdm import tqdm
from tqdm.contrib.logging import logging_redirect_tqdm

from specdraft.log import get_logger

logger = get_logger()

PendingFuture = Tuple[int, concurrent.futures.Future, Any]


def resolve_futures(futures: List[PendingFuture]):
    """
    Generator which yields (index, future, item) of supplied futures as they complete,
    continuing until all futures have finished executing.
    """
    while len(futures) > 0:
        for n, (index, future, item) in enumerate(futures):
            if future.done():
                yield index, future, item
                futures.pop(n)
                break
        else:
            sleep(0.05)


class ParallelErrorInfo(NamedTuple):
    item: Any
    extra_kwargs: Dict[str, Any]
    error: BaseException


def run_in_parallel(
    func: Callable,
    items: Iterable,
    extra_kwargs: Dict[str, Any],
    start_message: str,
    pbar_unit: str,
    max_workers: Optional[int] = None,
) -> Tuple[List[Any], List[ParallelErrorInfo]]:
    """
    Runs ``func(item, **extra_kwargs)`` for every item across worker processes.

    Args:
        func: picklable function run once per item.
        items: the work items, e.g. prompt indices.
        extra_kwargs: keyword arguments passed to every call. If there are none, input an empty Dict.
        start_message: string that is logged when processing begins.
        pbar_unit: unit shown on the progress bar.
        max_workers: worker process count; 1 runs everything in this process.

    Returns the results in item order (failed items are left out) and the errors.
    """
    items = list(items)
    results: Dict[int, Any] = {}
    errors: List[ParallelErrorInfo] = []
    logger.info(start_message)
    if max_workers == 1:
        with logging_redirect_tqdm(loggers=[logger]):
            for index, item in enumerate(tqdm(items, unit=pbar_unit)):
                try:
                    results[index] = func(item, **extra_kwargs)
                except Exception as error:
                    errors.append(ParallelErrorInfo(item, extra_kwargs, error))
        return [results[i] for i in sorted(results)], errors
    with concurrent.futures.ProcessPoolExecutor(max_workers=max_workers) as executor:
        futures = [(index, executor.submit(func, item, **extra_kwargs), item) for index, item in enumerate(items)]
        with logging_redirect_tqdm(loggers=[logger]):
            with tqdm(total=len(futures), unit=pbar_unit) as pbar:
                for index, future, item in resolve_futures(futures):
                    pbar.update()
                    if error := future.exception():
                        errors.append(ParallelErrorInfo(item, extra_kwargs, error))
                    else:
                        results[index] = future.result()
    return [results[i] for i in sorted(results)], errors


def write_errors_csv(errors: List[ParallelErrorInfo], output_file: Path) -> None:
    with open(output_file, mode="w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["item", "error"])
        writer.writeheader()
        writer.writerows([{"item": str(error.item), "error": str(error.error)} for error in errors])


class ParallelError(Exception):
    pass


def reraise_with_stack(func):
    """
    Decorator that keeps the worker-side traceback in the message of errors raised in a subprocess.
    """

    @functools.wraps(func)
    def wrapped(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except Exception as err:
            message = f"{err.__class__.__name__} exception found while running {func.__name__}: {err}: {''.join(traceback.format_exception(err))}"
            raise ParallelError(message) from None

    return wrapped
