/** Result-panel model: a pure projection of the service payload. The UI
 *  never re-ranks or re-derives anything; it displays exactly what the
 *  service returned, emphasizing the finest confident level. */

import type { ProbePayload } from "./types.js";

export interface PanelRow {
  id: string;
  name: string;
  level: string;
  confidence: number;
  /** True on the deepest accepted node (rendered bold). */
  emphasized: boolean;
}

export interface PanelState {
  rows: PanelRow[];
  finestLevel: string;
  tags: string[];
  entropyPerLevel: number[];
  pathLength: number;
}

export function buildPanel(payload: ProbePayload): PanelState {
  const rows = payload.path.map((entry, i) => ({
    id: entry.id,
    name: entry.name,
    level: entry.level,
    confidence: entry.confidence,
    emphasized: i === payload.path.length - 1,
  }));
  return {
    rows,
    finestLevel: payload.finest_level,
    tags: [...payload.tags],
    entropyPerLevel: [...payload.entropy_per_level],
    pathLength: payload.path.length,
  };
}

export function formatConfidence(value: number): string {
  return `${(100 * value).toFixed(1)}%`;
}
