// Typed client for the /v1 JSON API. Network errors are retried once;
// structured server errors (parse errors etc.) are surfaced, not retried.

import type { Rle } from "./rle.js";

export interface SegmentResponse {
  session_id: string;
  mask_rle: Rle;
  dice: number | null;
  hd95: number | null;
  snapshot_hash: string;
}

export interface ParsedCommand {
  verb: string;
  target_class: number | null;
  magnitude: number;
}

export interface InterveneResponse {
  session_id: string;
  mask_rle: Rle;
  parsed_command: ParsedCommand;
  film_summary: Record<string, number[]>;
  dice_before: number | null;
  dice_after: number | null;
  hd95_after: number | null;
  history_length: number;
  snapshot_hash: string;
}

export interface SampleResponse {
  sample_id: string;
  image_png: string;
  ground_truth_rle: Rle;
  descriptor: Record<string, unknown>;
  induced_corruption: { kind: string; severity: number } | null;
  domain: string;
  snapshot_hash: string;
}

export interface ModelInfo {
  snapshot_hash: string;
  grammar_help: string;
  num_classes: number;
  image_size: number;
  reasoner_backend: string;
}

export interface ApiError {
  code: string;
  message: string;
  position?: number;
  grammar?: string;
}

export class ServerError extends Error {
  constructor(
    public status: number,
    public detail: ApiError,
  ) {
    super(detail.message);
  }
}

type FetchLike = typeof fetch;

export class ApiClient {
  constructor(
    private base: string = "",
    private fetchImpl: FetchLike = fetch,
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    let response: Response;
    try {
      response = await this.fetchImpl(this.base + path, init);
    } catch (_err) {
      // one retry on pure network failure
      response = await this.fetchImpl(this.base + path, init);
    }
    const body = await response.json();
    if (!response.ok) {
      throw new ServerError(response.status, body.error ?? { code: "unknown", message: "unknown error" });
    }
    return body as T;
  }

  modelInfo(): Promise<ModelInfo> {
    return this.request<ModelInfo>("/v1/model/info");
  }

  sample(domain: string, index: number, corruption?: string, severity?: number): Promise<SampleResponse> {
    const params = new URLSearchParams({ domain, index: String(index) });
    if (corruption) {
      params.set("corruption", corruption);
      params.set("severity", String(severity ?? 0.7));
    }
    return this.request<SampleResponse>(`/v1/sample?${params}`);
  }

  segment(sampleId: string, sessionId?: string): Promise<SegmentResponse> {
    return this.request<SegmentResponse>("/v1/segment", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ sample_id: sampleId, session_id: sessionId }),
    });
  }

  intervene(sessionId: string, commandText: string): Promise<InterveneResponse> {
    return this.request<InterveneResponse>("/v1/intervene", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ session_id: sessionId, command_text: commandText }),
    });
  }
}
