import time
from datetime import datetime, timedelta

from specdraft.log import get_logger

logger = get_logger()


def start_timer() -> float:
    """
    Starts the command timer and logs the start time.
    Returns the perf_counter value at the start, in fractional seconds.
    """
    start_time = time.perf_counter()
    logger.info(f"Command started: {datetime.now()}")
    return start_time


def end_timer(start_time: float) -> timedelta:
    elapsed = timedelta(seconds=time.perf_counter() - start_time)
    logger.info(f"Command finished: {datetime.now()} in {elapsed}")
    return elapsed
