"""
Job queue for multi-run commands (compare, ablation, sweep).

- One job = one experiment configuration with a label.
- Jobs run FIFO on the calling thread, or on a thread pool when jobs > 1.
- Results are always read back in submission order, whatever the pool did.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from typing import Any, Callable, Dict, List, Optional

from cloudfl.config.models import ExperimentConfig

logger = logging.getLogger(__name__)


class JobStatus(Enum):
    """Job lifecycle states"""
    PENDING = "pending"
    PROCESSING = "processing"
    SUCCESS = "success"
    FAILED = "failed"


@dataclass
class SweepJob:
    job_id: str  # "<position>:<label>"
    label: str
    config: ExperimentConfig

    created_at: datetime = field(default_factory=datetime.now)
    started_at: Optional[datetime] = None
    completed_at: Optional[datetime] = None
    status: JobStatus = JobStatus.PENDING

    result: Any = None
    error: Optional[BaseException] = None

    def __hash__(self):
        return hash(self.job_id)

    def __eq__(self, other):
        if isinstance(other, SweepJob):
            return self.job_id == other.job_id
        return False


class SweepQueue:
    """FIFO queue of experiment jobs with status tracking."""

    def __init__(self):
        self.queue: List[SweepJob] = []
        self.jobs_dict: Dict[str, SweepJob] = {}

    def add_job(self, label: str, config: ExperimentConfig) -> str:
        job_id = f"{len(self.queue)}:{label}"
        job = SweepJob(job_id=job_id, label=label, config=config)
        self.queue.append(job)
        self.jobs_dict[job_id] = job
        logger.info(f"[Sweep] Added job {job_id}, queue size: {len(self.queue)}")
        return job_id

    def get_job(self, job_id: str) -> Optional[SweepJob]:
        return self.jobs_dict.get(job_id)

    def pending(self) -> List[SweepJob]:
        return [job for job in self.queue if job.status == JobStatus.PENDING]

    def mark_processing(self, job: SweepJob):
        job.status = JobStatus.PROCESSING
        job.started_at = datetime.now()

    def mark_success(self, job: SweepJob, result: Any):
        job.status = JobStatus.SUCCESS
        job.result = result
        job.completed_at = datetime.now()
        logger.info(f"[Sweep] Job {job.job_id} completed in {(job.completed_at - job.started_at).total_seconds():.1f}s")

    def mark_failed(self, job: SweepJob, error: BaseException):
        job.status = JobStatus.FAILED
        job.error = error
        job.completed_at = datetime.now()
        logger.error(f"[Sweep] Job {job.job_id} failed: {error}")

    def results_in_order(self) -> List[Any]:
        """Results by submission order; re-raises the first failure."""
        for job in self.queue:
            if job.status == JobStatus.FAILED:
                raise job.error
            if job.status != JobStatus.SUCCESS:
                raise RuntimeError(f"job {job.job_id} has not finished (status {job.status.value})")
        return [job.result for job in self.queue]

    def get_queue_status(self) -> Dict[str, int]:
        counts = {status.value: 0 for status in JobStatus}
        for job in self.queue:
            counts[job.status.value] += 1
        return counts


class SweepWorker:
    """Drains a SweepQueue with `runner(label, config)`; serial unless jobs > 1."""

    def __init__(self, runner: Callable[[str, ExperimentConfig], Any], jobs: int = 1):
        if jobs < 1:
            raise ValueError("jobs must be >= 1")
        self.runner = runner
        self.jobs = jobs

    def _process(self, queue: SweepQueue, job: SweepJob):
        queue.mark_processing(job)
        logger.info(f"[Sweep Worker] Processing: {job.job_id}")
        try:
            queue.mark_success(job, self.runner(job.label, job.config))
        except Exception as e:
            queue.mark_failed(job, e)

    def run(self, queue: SweepQueue) -> SweepQueue:
        jobs = queue.pending()
        if self.jobs == 1 or len(jobs) <= 1:
            for job in jobs:
                self._process(queue, job)
        else:
            with ThreadPoolExecutor(max_workers=self.jobs) as pool:
                list(pool.map(lambda job: self._process(queue, job), jobs))
        logger.info(f"[Sweep Worker] Finished: {queue.get_queue_status()}")
        return queue
