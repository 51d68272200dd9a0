from __future__ import annotations

import logging
import signal
import threading
from contextlib import contextmanager
from typing import Any, Callable, Iterator

logger = logging.getLogger(__name__)

# Handlers can only be installed from the main thread. The first signal restores
# the previous handlers, so a second Ctrl-C interrupts the process as usual.


@contextmanager
def on_stop(callback: Callable[[], None]) -> Iterator[None]:
    if threading.current_thread() is not threading.main_thread():
        logger.warning(
            "Skipping signal handling, because this is not the main thread",
            extra={"action": "skip_signal_handlers"},
        )
        yield
        return

    sigint_handler = signal.getsignal(signal.SIGINT)
    sigterm_handler = signal.getsignal(signal.SIGTERM)
    uninstalled = False

    def uninstall_and_callback(*args) -> None:
        nonlocal uninstalled
        uninstalled = True
        uninstall(sigint_handler=sigint_handler, sigterm_handler=sigterm_handler)
        callback()

    try:
        install(handler=uninstall_and_callback)
        yield
    finally:
        if not uninstalled:
            uninstall(sigint_handler=sigint_handler, sigterm_handler=sigterm_handler)


def install(handler: Callable) -> None:
    logger.debug(
        "Installing signal handler", extra={"action": "install_signal_handlers"}
    )
    signal.signal(signal.SIGINT, handler)
    signal.signal(signal.SIGTERM, handler)


def uninstall(sigint_handler: Any, sigterm_handler: Any) -> None:
    logger.debug(
        "Resetting previous signal handler",
        extra={"action": "uninstall_signal_handlers"},
    )
    signal.signal(signal.SIGINT, sigint_handler)
    signal.signal(signal.SIGTERM, sigterm_handler)
