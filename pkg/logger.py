"""
Logger Module
Handles logging setup and the JSON-lines run event log
"""

import os
import json
import logging
from datetime import datetime, timedelta
from logging.handlers import RotatingFileHandler

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logging(level='INFO', log_dir='logs', quiet=False, max_bytes=10*1024*1024, backup_count=5):
    """Setup logging configuration"""
    # Create logs directory if it doesn't exist
    if not os.path.exists(log_dir):
        os.makedirs(log_dir)

    file_handler = RotatingFileHandler(
        os.path.join(log_dir, 'ragadapt.log'),
        maxBytes=max_bytes,
        backupCount=backup_count,
        encoding='utf-8'
    )
    stream_handler = logging.StreamHandler()
    if quiet:
        stream_handler.setLevel(logging.WARNING)

    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format=LOG_FORMAT,
        handlers=[file_handler, stream_handler],
        force=True
    )


class RunLogger:
    def __init__(self, log_dir='logs'):
        self.logger = logging.getLogger(__name__)
        self.events_file = os.path.join(log_dir, 'events.jsonl')
        self.ensure_log_file_exists()

    def ensure_log_file_exists(self):
        """Ensure the events log file exists"""
        directory = os.path.dirname(self.events_file)
        if directory and not os.path.exists(directory):
            os.makedirs(directory)
        if not os.path.exists(self.events_file):
            open(self.events_file, 'w', encoding='utf-8').close()

    def log_event(self, event, **fields):
        """Append one event to the events log"""
        entry = {'timestamp': datetime.now().isoformat(), 'event': event}
        entry.update(fields)

        try:
            with open(self.events_file, 'a', encoding='utf-8') as f:
                f.write(json.dumps(entry, ensure_ascii=False, default=str) + '\n')
            self.logger.debug(f"Event logged: {event}")

        except Exception as e:
            self.logger.error(f"Error logging event: {e}")

    def get_recent_events(self, limit=50):
        """Get recent event entries"""
        events = []

        try:
            with open(self.events_file, 'r', encoding='utf-8') as f:
                lines = f.readlines()

            recent_lines = lines[-limit:] if len(lines) > limit else lines
            for line in recent_lines:
                try:
                    events.append(json.loads(line.strip()))
                except json.JSONDecodeError:
                    continue

        except FileNotFoundError:
            self.logger.warning("Events log file not found")
        except Exception as e:
            self.logger.error(f"Error reading events: {e}")

        return events

    def get_events_by_type(self, event_type, limit=20):
        """Get events filtered by type"""
        all_events = self.get_recent_events(limit=1000)
        filtered = [e for e in all_events if e.get('event') == event_type]
        return filtered[-limit:] if len(filtered) > limit else filtered

    def cleanup_old_events(self, days_to_keep=30):
        """Drop events older than the given number of days"""
        cutoff_date = datetime.now() - timedelta(days=days_to_keep)

        try:
            kept = []
            for entry in self.get_recent_events(limit=10000):
                try:
                    if datetime.fromisoformat(entry['timestamp']) > cutoff_date:
                        kept.append(entry)
                except (KeyError, TypeError, ValueError):
                    continue

            with open(self.events_file, 'w', encoding='utf-8') as f:
                for entry in kept:
                    f.write(json.dumps(entry, ensure_ascii=False, default=str) + '\n')

            self.logger.info(f"Cleaned up old events, kept {len(kept)} entries")
            return len(kept)

        except Exception as e:
            self.logger.error(f"Error cleaning up events: {e}")
            return None
