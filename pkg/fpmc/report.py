"""报表生成模块 - 生成 Excel 比较报表"""
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional

from openpyxl import Workbook
from openpyxl.styles import Alignment, Border, Font, PatternFill, Side
from openpyxl.utils import get_column_letter

from .evaluation import ComparisonReport, SweepResult, relative_error_change


class ReportGenerator:
    """报表生成器"""

    def __init__(self, output_dir: str):
        self.output_dir = Path(output_dir)
        self.header_font = Font(bold=True, size=11, color="FFFFFF")
        self.header_fill = PatternFill(start_color="4472C4", end_color="4472C4", fill_type="solid")
        side = Side(style='thin')
        self.border = Border(left=side, right=side, top=side, bottom=side)
        self.center_align = Alignment(horizontal='center', vertical='center')
        self.right_align = Alignment(horizontal='right', vertical='center')

    def _sanitize_sheet_name(self, name: str) -> str:
        """清理工作表名称，移除Excel不允许的字符"""
        for char in [':', '/', '\\', '?', '*', '[', ']']:
            name = name.replace(char, '_')
        return name[:31]

    def _title(self, ws, text: str, span: int):
        ws.merge_cells(start_row=1, start_column=1, end_row=1, end_column=span)
        ws['A1'] = f"{text} - {datetime.now().strftime('%Y-%m-%d')}"
        ws['A1'].font = Font(bold=True, size=14)
        ws['A1'].alignment = self.center_align

    def _header(self, ws, row: int, headers: List[str]):
        for col, header in enumerate(headers, 1):
            cell = ws.cell(row=row, column=col, value=header)
            cell.font = self.header_font
            cell.fill = self.header_fill
            cell.border = self.border
            cell.alignment = self.center_align

    def _number(self, ws, row: int, col: int, value, fmt: str = '0.000000'):
        cell = ws.cell(row=row, column=col, value=value)
        cell.border = self.border
        cell.alignment = self.right_align
        cell.number_format = fmt
        return cell

    def _widths(self, ws, widths: List[int]):
        for col, width in enumerate(widths, 1):
            ws.column_dimensions[get_column_letter(col)].width = width

    def _create_comparison_sheet(self, wb: Workbook, report: ComparisonReport):
        """样本比较表：每个去噪器一行"""
        ws = wb.create_sheet("样本比较")
        self._title(ws, f"样本比较 (参考: {report.reference})", 7)
        self._header(ws, 3, ['去噪器', 'MSE', 'MSE 标准误', 'r²', 'r² 标准误', '样本数', '剔除'])
        row = 4
        for name, stats in report.rows.items():
            ws.cell(row=row, column=1, value=name).border = self.border
            self._number(ws, row, 2, stats.mse_mean)
            self._number(ws, row, 3, stats.mse_se)
            self._number(ws, row, 4, stats.r2_mean, '0.0000')
            self._number(ws, row, 5, stats.r2_se, '0.0000')
            self._number(ws, row, 6, stats.n, '0')
            self._number(ws, row, 7, stats.excluded, '0')
            row += 1
        ws.cell(row=row + 1, column=1, value=f"r² 约定: {report.r2_convention}")
        self._widths(ws, [22, 14, 14, 10, 12, 8, 8])

    def _create_sweep_sheet(self, wb: Workbook, name: str, sweep: SweepResult,
                            baseline: Optional[SweepResult]):
        """误差扫描表；给定基线时附加相对变化列"""
        ws = wb.create_sheet(self._sanitize_sheet_name(f"扫描_{name}"))
        headers = ['t', 'MSE', '标准误']
        change = None
        if baseline is not None:
            headers.append('相对基线 (%)')
            change = relative_error_change(baseline, sweep)
        self._title(ws, f"去噪误差扫描: {name}", len(headers))
        self._header(ws, 3, headers)
        for k, t in enumerate(sweep.t):
            row = 4 + k
            self._number(ws, row, 1, float(t), '0.0000')
            self._number(ws, row, 2, float(sweep.mse[k]))
            self._number(ws, row, 3, float(sweep.stderr[k]))
            if change is not None:
                self._number(ws, row, 4, float(change[k]), '0.00')
        ws.cell(row=5 + len(sweep.t), column=1, value=f"每个 t 的样本数: {sweep.n_per_t}")
        self._widths(ws, [10, 14, 14, 14])

    def generate(self, comparison: Optional[ComparisonReport] = None,
                 sweeps: Optional[Dict[str, SweepResult]] = None,
                 baseline: Optional[str] = None, filename: str = "fpmc_report.xlsx") -> str:
        """
        生成比较报表

        Args:
            comparison: 样本比较结果
            sweeps: {名称: 扫描结果}
            baseline: sweeps 中作为基线的名称

        Returns:
            报表文件路径
        """
        wb = Workbook()
        wb.remove(wb.active)
        sweeps = sweeps or {}
        if comparison is not None:
            self._create_comparison_sheet(wb, comparison)
        base = sweeps.get(baseline) if baseline else None
        for name, sweep in sweeps.items():
            self._create_sweep_sheet(wb, name, sweep, base if name != baseline else None)
        if not wb.sheetnames:
            wb.create_sheet("空").cell(row=1, column=1, value="暂无结果")

        self.output_dir.mkdir(parents=True, exist_ok=True)
        report_path = self.output_dir / filename
        wb.save(str(report_path))
        return str(report_path)


def generate_report(output_dir: str, comparison: Optional[ComparisonReport] = None,
                    sweeps: Optional[Dict[str, SweepResult]] = None,
                    baseline: Optional[str] = None) -> str:
    """便捷函数：生成报表"""
    return ReportGenerator(output_dir).generate(comparison, sweeps, baseline)
