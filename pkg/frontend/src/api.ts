/** Thin typed client for the annotation service's /v1 endpoints. */

import type { Axis, JobDoc, PromptJson, VolumeInfo } from "./types.js";

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
    this.name = "ApiError";
  }
}

type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private base: string = "",
    private fetchFn: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchFn(this.base + path, init);
    const text = await response.text();
    if (!response.ok) {
      let message = text;
      try {
        message = (JSON.parse(text) as { error?: string }).error ?? text;
      } catch {
        /* not JSON: keep raw text */
      }
      throw new ApiError(response.status, message);
    }
    return JSON.parse(text) as T;
  }

  async listVolumes(): Promise<VolumeInfo[]> {
    const doc = await this.request<{ volumes: VolumeInfo[] }>("/v1/volumes");
    return doc.volumes;
  }

  getVolume(id: string): Promise<VolumeInfo> {
    return this.request<VolumeInfo>(`/v1/volumes/${encodeURIComponent(id)}`);
  }

  /** URL of a slice PNG; `overlay` tints it with a job's mask server-side. */
  sliceUrl(id: string, axis: Axis, index: number, overlay?: string): string {
    const suffix = overlay ? `?overlay=${encodeURIComponent(overlay)}` : "";
    return `${this.base}/v1/volumes/${encodeURIComponent(id)}/slices/${axis}/${index}${suffix}`;
  }

  createJob(volumeId: string, axis: Axis, startIndex: number,
            prompt: PromptJson): Promise<JobDoc> {
    return this.request<JobDoc>(`/v1/volumes/${encodeURIComponent(volumeId)}/jobs`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ axis, start_index: startIndex, prompt }),
    });
  }

  getJob(id: string): Promise<JobDoc> {
    return this.request<JobDoc>(`/v1/jobs/${encodeURIComponent(id)}`);
  }

  refine(parentJobId: string, startIndex: number, prompt: PromptJson): Promise<JobDoc> {
    return this.request<JobDoc>(`/v1/jobs/${encodeURIComponent(parentJobId)}/refine`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ start_index: startIndex, prompt }),
    });
  }
}
