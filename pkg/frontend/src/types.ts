/** Payload shapes of the embedding service endpoints. */

export interface AttributeInfo {
  name: string;
  file: string;
  cardinality: number;
  dim: number;
  metadata_keys: string[];
}

export interface AttributesResponse {
  attributes: AttributeInfo[];
  card: { count: number; dim: number } | null;
  schema_hash: string;
}

export interface ProjectionPoint {
  index: number;
  token: string;
  coords: number[];
  group: string;
}

export interface ProjectionResponse {
  attribute: string;
  method: string;
  dims: number;
  color_by: string | null;
  explained_variance: number[];
  groups: string[];
  points: ProjectionPoint[];
}

export interface MetadataResponse {
  attribute: string;
  keys: string[];
  groups: Record<string, Record<string, string>>;
  tokens: Record<string, string>;
}

export interface ServiceError {
  status: number;
  detail: unknown;
}
