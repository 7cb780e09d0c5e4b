import json
import csv
import io
import logging
import os
from typing import Dict, Any, List, Optional

import numpy as np

logger = logging.getLogger(__name__)


def _to_builtin(value: Any) -> Any:
    """json.dump fallback for numpy scalars and arrays."""
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (set, frozenset)):
        return sorted(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


class ReportExporter:
    """Writes report tables as JSON documents or CSV files.

    Output carries no timestamps, so the same inputs always give the same bytes.
    """

    def export_to_json(self, data: Any, filename: str) -> bool:
        """Exports data to a JSON file with sorted keys."""
        try:
            parent = os.path.dirname(os.path.abspath(filename))
            os.makedirs(parent, exist_ok=True)
            with open(filename, 'w') as f:
                f.write(self.export_to_json_string(data))
            logger.info("Data successfully exported to %s", filename)
            return True
        except IOError as e:
            logger.error("Error writing JSON file %s: %s", filename, e)
            return False

    def export_to_json_string(self, data: Any) -> str:
        return json.dumps(data, indent=2, sort_keys=True, default=_to_builtin) + "\n"

    def export_to_csv(self, data: List[Dict[str, Any]], filename: str,
                      metadata: Optional[Dict[str, Any]] = None) -> bool:
        """Exports a list of dictionaries to a CSV file with optional metadata as header comments.

        :param data: rows; the first row's key order fixes the column order
        :param filename: Output CSV filename
        :param metadata: Optional run parameters to include as '#' comment lines
        """
        if not data:
            logger.warning("No data to export to CSV.")
            return False

        try:
            parent = os.path.dirname(os.path.abspath(filename))
            os.makedirs(parent, exist_ok=True)
            with open(filename, 'w', newline='') as f:
                f.write(self.export_to_csv_string(data, metadata))
            logger.info("Data successfully exported to %s", filename)
            return True
        except IOError as e:
            logger.error("Error writing CSV file %s: %s", filename, e)
            return False

    def export_to_csv_string(self, data: List[Dict[str, Any]], metadata: Optional[Dict[str, Any]] = None) -> str:
        """Exports a list of dictionaries to a CSV formatted string.

        :raises ValueError: a row carries a column the first row lacks
        """
        if not data:
            return ""

        output = io.StringIO()
        if metadata:
            self._write_metadata_comments(output, metadata)
        writer = csv.DictWriter(output, fieldnames=list(data[0].keys()), lineterminator="\n")
        writer.writeheader()
        for row in data:
            writer.writerow({k: self._format_cell(v) for k, v in row.items()})
        return output.getvalue()

    @staticmethod
    def _format_cell(value: Any) -> Any:
        if value is None:
            return ""
        if isinstance(value, (float, np.floating)):
            return repr(float(value))
        return value

    def _write_metadata_comments(self, file_obj, metadata: Dict[str, Any]):
        """Writes run metadata as CSV comment lines (lines starting with #).

        :param file_obj: File object or StringIO to write to
        :param metadata: table name plus the parameters that produced it
        """
        file_obj.write("# Micro-expert compression report\n")
        if 'table' in metadata:
            file_obj.write(f"# Table: {metadata['table']}\n")
        if 'description' in metadata:
            file_obj.write(f"# Description: {metadata['description']}\n")

        parameters = {k: v for k, v in metadata.items() if k not in ('table', 'description')}
        if parameters:
            file_obj.write("#\n")
            file_obj.write("# Parameters:\n")
            for key in sorted(parameters):
                file_obj.write(f"#   {key}: {parameters[key]}\n")
        file_obj.write("#\n")
