from PySide6.QtCore import QObject, QRunnable, QThread, QThreadPool, Signal
import logging
import threading

logger = logging.getLogger(__name__)

# Set inside pool threads so that nested map() calls run inline instead of
# waiting on a pool whose threads are all busy with their parents.
_worker_state = threading.local()


class RunnerStopped(RuntimeError):
    """Raised by map() when the runner was stopped before all tasks finished."""


class SolveTask(QRunnable):
    """
    QRunnable task evaluating fn(item) for one work item of a map() call.
    """
    def __init__(self, index, fn, item, callback, stop_flag):
        super().__init__()
        self.index = index
        self.fn = fn
        self.item = item
        self.callback = callback
        self.stop_flag = stop_flag

    def run(self):
        if self.stop_flag.is_set():
            # Stopped while this task was still queued.
            self.callback(self.index, None, RunnerStopped("runner stopped"))
            return

        _worker_state.inside = True
        try:
            result, error = self.fn(self.item), None
        except Exception as err:
            result, error = None, err
        finally:
            _worker_state.inside = False

        self.callback(self.index, result, error)


class BackgroundRunner(QObject):
    """
    Runs independent work items (replications, population members, region/slot
    solves, sweep points) on a private thread pool. Results always come back
    in submission order, so seeded runs are reproducible whatever the
    completion order was.
    """
    # (finished, total) for the map() call in progress
    progress = Signal(int, int)

    def __init__(self, max_workers=None):
        super().__init__()
        self.max_workers = max_workers or QThread.idealThreadCount()
        self.thread_pool = QThreadPool()
        self.thread_pool.setMaxThreadCount(self.max_workers)
        self.stop_flag = threading.Event()

    def map(self, fn, items) -> list:
        items = list(items)
        if self.stop_flag.is_set():
            raise RunnerStopped("runner stopped")
        if self.max_workers <= 1 or len(items) <= 1 or getattr(_worker_state, "inside", False):
            return self._map_inline(fn, items)

        total = len(items)
        results = [None] * total
        errors = [None] * total
        finished = [0]
        all_done = threading.Condition()

        def on_task_done(index, result, error):
            with all_done:
                results[index] = result
                errors[index] = error
                finished[0] += 1
                count = finished[0]
                all_done.notify_all()
            self.progress.emit(count, total)

        for index, item in enumerate(items):
            self.thread_pool.start(SolveTask(index, fn, item, on_task_done, self.stop_flag))

        with all_done:
            # Tasks cleared by stop() never report back, so poll the flag.
            while not all_done.wait_for(lambda: finished[0] == total, timeout=0.25):
                if self.stop_flag.is_set():
                    raise RunnerStopped("runner stopped before all tasks finished")

        for error in errors:
            if error is not None:
                raise error
        return results

    def _map_inline(self, fn, items):
        results = []
        for count, item in enumerate(items, start=1):
            if self.stop_flag.is_set():
                raise RunnerStopped("runner stopped")
            results.append(fn(item))
            self.progress.emit(count, len(items))
        return results

    def stop(self):
        """Cancels queued tasks; running tasks finish their current item."""
        self.stop_flag.set()
        self.thread_pool.clear()
        logger.info("Background Runner: Stop requested, queued tasks cleared")

    def wait(self):
        self.thread_pool.waitForDone()
