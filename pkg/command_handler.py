"""
Command Handler Module
Handles the gen-world, run, verify and report commands and maps failures to exit codes
"""

import logging
import sys
from pathlib import Path

from errors import ConfigInvalid, RagAdaptError
from experiment_runner import (
    RunDirectory,
    accuracy_orderings,
    read_summary,
    run_experiment,
    write_run,
)
from logger import RunLogger
from messages import Messages
from synthetic_world import make_world, save_world, validate_world
from verification import run_verification, write_verification

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_CHECK_FAILED = 3


class CommandHandler:
    def __init__(self, config, run_logger=None, stdout=None, stderr=None):
        self.logger = logging.getLogger(__name__)
        self.config = config
        self.run_logger = run_logger or RunLogger(config.logging.log_dir)
        self.messages = Messages()
        self.language = config.logging.language
        self.stdout = stdout or sys.stdout
        self.stderr = stderr or sys.stderr

    def say(self, key, **kwargs):
        print(self.messages.get_message(key, self.language, **kwargs), file=self.stdout)

    def execute(self, command):
        """Run one command and return its exit code"""
        handlers = {
            'gen-world': self.gen_world_command,
            'run': self.run_command,
            'verify': self.verify_command,
            'report': self.report_command,
        }
        try:
            return handlers[command]()
        except ConfigInvalid as e:
            self.logger.error(f"Invalid configuration: {e}")
            self.run_logger.log_event('command_failed', command=command, error=str(e), exit_code=EXIT_CONFIG)
            print(self.messages.get_message('config_invalid', self.language, error=e), file=self.stderr)
            return EXIT_CONFIG
        except (RagAdaptError, OSError, ValueError) as e:
            self.logger.error(f"Command {command} failed: {e}")
            self.run_logger.log_event('command_failed', command=command, error=str(e), exit_code=EXIT_RUNTIME)
            print(self.messages.get_message('command_failed', self.language, error=e), file=self.stderr)
            return EXIT_RUNTIME

    def gen_world_command(self):
        """Build the configured world and write it to the output directory"""
        world = validate_world(make_world(self.config.world))
        target = Path(self.config.output)
        with RunDirectory(target) as out:
            save_world(world, out)

        self.run_logger.log_event('world_written', path=str(target), classes=world.classes,
                                  dim=world.dim, nu=world.nu, tau=world.tau)
        self.say('world_written', path=target, classes=world.classes, dim=world.dim,
                 clusters=len(world.clusters), database=len(world.database),
                 nu=world.nu, tau=world.tau, kappa_cosine=1.0 - world.config.kappa ** 2 / 2.0)
        return EXIT_OK

    def run_command(self):
        """Run the accuracy sweep"""
        config = self.config
        self.run_logger.log_event('run_started', trials=config.trials, shots=list(config.shots),
                                  modes=list(config.modes), heads=list(config.heads),
                                  master_seed=config.master_seed, threads=config.threads)
        result = run_experiment(config)
        target = write_run(result, config, config.output)

        self.run_logger.log_event('run_finished', path=str(target), rows=len(result.rows))
        self.say('run_finished', rows=len(result.rows), trials=config.trials, path=target)
        return EXIT_OK

    def verify_command(self):
        """Run every theory check; exit 3 if an applicable check fails"""
        result = run_verification(self.config)
        target = write_verification(result, self.config, self.config.output)

        for label, check in result.failures():
            self.run_logger.log_event('check_failed', world=label, check=check.name,
                                      lhs=check.lhs, rhs=check.rhs)
        checks = result.labeled_checks()
        self.run_logger.log_event('verify_finished', path=str(target), checks=len(checks),
                                  failed=len(result.failures()))
        print(Path(target, 'theory_report.txt').read_text(encoding='utf-8'), file=self.stdout)
        return EXIT_OK if result.passed else EXIT_CHECK_FAILED

    def report_command(self):
        """Print the summary of an existing run with its accuracy orderings"""
        path = Path(self.config.output) / 'summary.csv'
        if not path.exists():
            self.say('no_summary', path=self.config.output)
            return EXIT_RUNTIME
        rows = read_summary(path)
        text = self.messages.get_summary_text(rows, accuracy_orderings(rows), path, self.language)
        print(text, file=self.stdout)
        return EXIT_OK
