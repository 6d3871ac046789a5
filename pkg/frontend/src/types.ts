/** Wire types mirroring the probing service's JSON payloads. */

export interface PathEntry {
  id: string;
  name: string;
  level: string;
  confidence: number;
}

export interface WindowGeometry {
  /** Top-left corner of the nominal square window in image space; may extend
   *  past the image edges when the probe sits near a border. */
  x: number;
  y: number;
  size: number;
}

export interface ProbePayload {
  path: PathEntry[];
  finest_level: string;
  window: WindowGeometry;
  tags: string[];
  entropy_per_level: number[];
  seed?: number;
}

export interface TaxonomyNodeDoc {
  id: string;
  name: string;
  level: string;
  parent: string | null;
}

export interface TaxonomyDoc {
  level_names: string[];
  nodes: TaxonomyNodeDoc[];
}

export interface PropertiesPayload {
  id: string;
  name: string;
  properties: Record<string, [number, number] | null>;
  tags: string[];
}

export interface HealthPayload {
  version: string;
  model_hash: string;
  taxonomy_hash: string;
}

export interface ProbeRequest {
  x: number;
  y: number;
  threshold?: number;
  seed?: number;
  sampleId?: string;
  imageBlob?: Blob;
}
