"""
Messages Module
Contains all user-facing text for command output and reports
"""


class Messages:
    def __init__(self):
        self.messages = {
            'en': {
                'world_written': 'World written to {path}\n  C={classes} d={dim} clusters={clusters} database={database}\n  nu={nu:.6f} tau={tau:.6f} (cap cosine {kappa_cosine:.6f})',

                'run_finished': 'Run finished: {rows} result rows over {trials} trial(s) in {path}',

                'verify_header': 'Theory verification report\n==========================\n',

                'verify_measured': 'Measured: nu={nu:.6f} tau={tau:.6f} rho_c_hat={rho_c_hat:.6f} kappa={kappa:.6f} xi_i2i={xi_i2i:.6g} xi_t2i={xi_t2i:.6g}',

                'verify_events': 'Events: p1={p1:.4f} p2={p2:.4f} p3={p3:.4f} p4={p4:.4f}',

                'check_line': '[{status}] {name}: lhs={lhs} rhs={rhs}',

                'verify_footer': '\n{passed} passed, {failed} failed, {skipped} not applicable',

                'report_header': 'Accuracy summary from {path}\n',

                'report_row': 'K={shots:<4} {label:<22} {mean:.4f} +/- {std:.4f}',

                'ordering_line': 'K={shots}: {claim} -> {verdict}',

                'no_summary': 'No summary.csv found in {path}',

                'command_failed': 'Error: {error}',

                'config_invalid': 'Invalid configuration: {error}',
            }
        }

    def get_message(self, message_key, language='en', **kwargs):
        """Get a message in the specified language"""
        try:
            message = self.messages[language][message_key]
            if kwargs:
                return message.format(**kwargs)
            return message
        except KeyError:
            return f"Message not found: {message_key}"

    def get_report_text(self, report, world_index=None, language='en'):
        """Render a theory report as human-readable text"""
        lines = [self.get_message('verify_header', language)]
        measured = report.measured
        if measured:
            lines.append(self.get_message(
                'verify_measured', language,
                nu=measured.get('nu', float('nan')),
                tau=measured.get('tau', float('nan')),
                rho_c_hat=measured.get('rho_c_hat', float('nan')),
                kappa=measured.get('kappa', float('nan')),
                xi_i2i=measured.get('xi_i2i', float('nan')),
                xi_t2i=measured.get('xi_t2i', float('nan')),
            ))
        if report.events is not None:
            events = report.events
            lines.append(self.get_message('verify_events', language,
                                          p1=events.p1, p2=events.p2, p3=events.p3, p4=events.p4))

        passed = failed = skipped = 0
        for check in report.checks:
            if not check.applicable:
                status, skipped = 'N/A ', skipped + 1
            elif check.satisfied:
                status, passed = 'PASS', passed + 1
            else:
                status, failed = 'FAIL', failed + 1
            lines.append(self.get_message('check_line', language, status=status, name=check.name,
                                          lhs=f"{check.lhs:.6g}", rhs=f"{check.rhs:.6g}"))

        lines.append(self.get_message(
            'verify_footer', language, passed=passed, failed=failed, skipped=skipped))
        return '\n'.join(lines)

    def get_summary_text(self, rows, orderings, path, language='en'):
        """Render summary rows and accuracy orderings"""
        lines = [self.get_message('report_header', language, path=path)]
        for row in rows:
            lines.append(self.get_message('report_row', language, shots=row['K'],
                                          label=f"{row['retrieval_mode']}-{row['head']}",
                                          mean=float(row['accuracy_mean']),
                                          std=float(row['accuracy_std'] or 'nan')))
        if orderings:
            lines.append('')
        for shots, claim, holds in orderings:
            lines.append(self.get_message('ordering_line', language, shots=shots, claim=claim,
                                          verdict='holds' if holds else 'does not hold'))
        return '\n'.join(lines)
