/** Inline SVG sparklines for the per-iteration metric series.
 *
 * Null entries (the service sends null where a value is infinite, e.g. the
 * PSNR of two identical frames) leave a gap instead of distorting the scale.
 */

export function sparklinePoints(
  values: Array<number | null>,
  width = 120,
  height = 32,
): string {
  const present = values.filter((v): v is number => v !== null && Number.isFinite(v));
  if (present.length < 2) return "";
  const min = Math.min(...present);
  const max = Math.max(...present);
  const range = max - min || 1;
  const step = values.length > 1 ? width / (values.length - 1) : 0;
  const points: string[] = [];
  values.forEach((v, i) => {
    if (v === null || !Number.isFinite(v)) return;
    const x = i * step;
    const y = height - 2 - ((v - min) / range) * (height - 4);
    points.push(`${x.toFixed(1)},${y.toFixed(1)}`);
  });
  return points.join(" ");
}

export function sparklineSvg(
  values: Array<number | null>,
  width = 120,
  height = 32,
): string {
  const points = sparklinePoints(values, width, height);
  const polyline = points
    ? `<polyline points="${points}" fill="none" stroke="currentColor" ` +
      `stroke-width="1.5" stroke-linecap="round" stroke-linejoin="round"/>`
    : "";
  return (
    `<svg class="sparkline" width="${width}" height="${height}" ` +
    `viewBox="0 0 ${width} ${height}" aria-hidden="true">${polyline}</svg>`
  );
}

export function formatMetric(value: number | null | undefined): string {
  if (value === null || value === undefined || !Number.isFinite(value)) return "—";
  const abs = Math.abs(value);
  if (abs !== 0 && (abs < 0.001 || abs >= 1000)) return value.toExponential(2);
  return value.toFixed(4);
}
